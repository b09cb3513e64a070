"""Hot-path kernels with backend selection at import.

The compiled extension is preferred when present; ``DRIFTFL_PURE_PYTHON=1``
forces the numpy fallback.  Both backends expose ``forward_batch`` and
``risk_grads`` with identical semantics (see kernels._numpy for the
reference contract).
"""

import os

from driftfl.kernels import _numpy

_impl = _numpy
if not os.environ.get("DRIFTFL_PURE_PYTHON"):
    try:
        from driftfl.kernels import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _numpy

forward_batch = _impl.forward_batch
risk_grads = _impl.risk_grads
PROB_FLOOR = _numpy.PROB_FLOOR


def backend_name() -> str:
    """Name of the active backend: 'compiled' or 'numpy'."""
    return _impl.BACKEND


def available_backends():
    """All importable backends, for parity tests and benchmarks."""
    backends = {"numpy": _numpy}
    try:
        from driftfl.kernels import _core
        backends["compiled"] = _core
    except ImportError:
        pass
    return backends
