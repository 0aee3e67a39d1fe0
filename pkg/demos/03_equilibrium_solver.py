"""The fixed-point (equilibrium) variant of the adaptive solver.

Instead of unrolling a fixed number of iterations, the solver runs its
update map to convergence with Anderson acceleration, and training
differentiates through just one application of the map at the fixed
point.  At evaluation we can iterate as long as we like -- the solution
is defined by the equation, not by the depth.
"""

import numpy as np

from mutn import networks as nets
from mutn import solvers as sv
from mutn import synthdata as sd
from mutn import training as tr

train_set = sd.gen_seismic_dataset(48, n=32, wavelet_half_len=8,
                                   noise=sd.NoiseSpec(0.01, 0))
test_set = sd.gen_seismic_dataset(6, n=32, wavelet_half_len=8,
                                  noise=sd.NoiseSpec(0.01, 1))

lu = sv.LUConfig(K=1, lam=0.1, tau=0.1, inner_steps_z=2,
                 inner_steps_theta=1, inner_lr_z=0.2, inner_lr_theta=0.01,
                 backtracking=True)
cfg = tr.TrainConfig(
    model_kind="aa_deq", task="deconv", epochs=6, batch_size=8, lr=1e-3,
    seed=0, eta0=0.3, lu=lu, deq=sv.DEQConfig(max_iter=8, tol=1e-3, lu=lu),
    prox_spec=nets.ConvNetSpec(1, 1, 16, 1, 3, kernel_size=3, residual=True),
    mm_spec=nets.ConvNetSpec(1, 2, 8, 1, 3, kernel_size=5))

print("training the equilibrium model (one-step implicit gradients) ...")
ckpt = tr.train(train_set, cfg)
print("train curve:", ["%.4g" % v for v in ckpt.curves["train"]])

# ---------------------------------------------------------------------
# run the fixed-point iteration much longer than it was trained with
short, _ = tr.evaluate(ckpt, test_set)
long, traces = tr.evaluate(ckpt, test_set, iter_override=30)

print("\npsnr at the training budget (%d iters): %.2f dB" %
      (cfg.deq.max_iter, short.aggregate()["psnr_db"][0]))
print("psnr when iterated to 30            : %.2f dB" %
      long.aggregate()["psnr_db"][0])

res = traces[0].fp_residual
print("\nfixed-point residual, first test instance:")
for i, r in enumerate(res[:12]):
    print("  iter %2d  |F(x)-x| = %.2e" % (i + 1, r))
print("converged flags:", [bool(t.converged) for t in traces])
