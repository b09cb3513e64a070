"""driftfl: desk-scale simulator for federated post-deployment adaptation
under non-stationary data streams.

Subpackages
-----------
numerics     dense primitives: softmax, cosine, regularized solves, simplex projection
model        split two-layer classifier with analytic risk gradients
shift        schedules, Dirichlet heterogeneity, synthetic drifting streams
estimation   confusion-matrix shift correction, drift signals, adaptive rate
federation   the two-phase partial-sharing adaptation loop
analysis     surrogate/regret diagnostics against oracle streams
cli          JSON-configured experiment runner
kernels      hot-path batch kernels (compiled extension + numpy fallback)
"""

__version__ = "0.1.0"

from driftfl.kernels import backend_name

__all__ = ["backend_name", "__version__"]
