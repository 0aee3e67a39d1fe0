"""Train a small model-adaptive unrolled solver and watch it iterate.

The solver alternates three updates per unrolled step: a data-consistent
split variable z, the weights theta of an untrained mismatch network
(updated only by gradient descent inside the solve, never by the outer
optimizer), and the reconstruction x through a learned proximal network.

Runs in under a minute on a laptop; sizes are deliberately tiny.
"""

import numpy as np

from mutn import networks as nets
from mutn import solvers as sv
from mutn import synthdata as sd
from mutn import training as tr

# ---------------------------------------------------------------------
# data: short sparse signals, mismatched wavelets
train_set = sd.gen_seismic_dataset(48, n=32, wavelet_half_len=8,
                                   noise=sd.NoiseSpec(0.01, 0))
test_set = sd.gen_seismic_dataset(8, n=32, wavelet_half_len=8,
                                  noise=sd.NoiseSpec(0.01, 1))

cfg = tr.TrainConfig(
    model_kind="aa_lu", task="deconv", epochs=4, batch_size=8, lr=1e-3,
    seed=0, eta0=0.5,
    lu=sv.LUConfig(K=3, lam=0.1, tau=0.1, inner_steps_z=2,
                   inner_steps_theta=1, inner_lr_z=0.2, inner_lr_theta=0.01,
                   backtracking=True),
    prox_spec=nets.ConvNetSpec(1, 1, 16, 1, 3, kernel_size=3, residual=True),
    mm_spec=nets.ConvNetSpec(1, 2, 8, 1, 3, kernel_size=5))

print("training a %d-step unrolled solver ..." % cfg.lu.K)
ckpt = tr.train(train_set, cfg)
print("per-epoch train mse:", ["%.4g" % v for v in ckpt.curves["train"]])
print("learned step size eta: %.4f (started at %.2f)" % (ckpt.eta, cfg.eta0))

# ---------------------------------------------------------------------
# evaluation: each test instance adapts its own mismatch weights
report, traces = tr.evaluate(ckpt, test_set)
agg = report.aggregate()
print("\ntest psnr: %.2f +/- %.2f dB | ssim %.3f" %
      (agg["psnr_db"][0], agg["psnr_db"][1], agg["ssim"][0]))

mean_mse = np.mean([t.mse for t in traces], axis=0)
print("\nmean reconstruction error per unrolled step:")
for k, m in enumerate(mean_mse):
    print("  k=%d  mse=%.5f  %s" % (k, m, "#" * int(40 * m / mean_mse[0])))
