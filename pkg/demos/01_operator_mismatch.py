"""What happens when the assumed forward model is wrong.

We build a seismic-style convolution problem: a sparse reflectivity
signal convolved with a Ricker wavelet.  The solver only gets an
*approximate* wavelet (its center frequency is off by up to 10%), and we
measure how much of the observation the approximate operator fails to
explain.
"""

import numpy as np

from mutn import operators as ops
from mutn import synthdata as sd

# ---------------------------------------------------------------------
# one synthetic instance
samples = sd.gen_seismic_dataset(1, n=128, mismatch_delta=0.1,
                                 noise=sd.NoiseSpec(0.01, seed=42))
s = samples[0]
print("signal shape      :", s.x.shape)
print("observation shape :", s.y.shape)

# the solver-facing wavelet vs the one that actually produced y
mid = s.a0_features.size // 2
print("\nassumed wavelet (center)  :", np.round(s.a0_features[mid - 2:mid + 3], 4))
print("true wavelet    (center)  :", np.round(s.true_features[mid - 2:mid + 3], 4))
print("wavelet agreement: %.1f dB (peak-referenced)" %
      sd.kernel_psnr(s.true_features, s.a0_features))

# ---------------------------------------------------------------------
# residual energy under the approximate operator
A0 = ops.stacked_toeplitz_operator(s.a0_features[None], s.x.shape[-1])
A_true = ops.stacked_toeplitz_operator(s.true_features[None], s.x.shape[-1])

y_hat_wrong = A0.apply(s.x[None])
y_hat_right = A_true.apply(s.x[None])

rel = lambda r: np.linalg.norm(r) / np.linalg.norm(s.y)
print("\nrelative residual with the true operator    : %.4f" %
      rel(s.y - y_hat_right))
print("relative residual with the assumed operator : %.4f" %
      rel(s.y - y_hat_wrong))
print("\nThe gap between those two numbers is exactly the structured")
print("model-mismatch term that the adaptive solvers absorb with an")
print("untrained per-instance residual network.")
