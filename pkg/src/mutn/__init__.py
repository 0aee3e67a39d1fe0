"""Model-adaptive unrolled solvers for inverse problems.

Reconstruction with an inexact forward operator: alternating updates of
the reconstruction, an auxiliary split variable and a per-instance
untrained residual network that absorbs the operator mismatch, run
either for a fixed number of unrolled iterations or to a fixed point.
"""

__version__ = "0.1.0"
