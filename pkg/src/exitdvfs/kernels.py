"""Backend selection for the schedule kernels.

The compiled extension is used when it was built and ``EXITDVFS_PURE_PYTHON``
is unset; otherwise the pure-Python twin is loaded.
"""
import os

from . import _pykernels as python_backend

try:
    if os.environ.get("EXITDVFS_PURE_PYTHON"):
        raise ImportError("pure-Python backend forced")
    from . import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

schedule_cost = _impl.schedule_cost
batch_cost = _impl.batch_cost
brute_force = _impl.brute_force
