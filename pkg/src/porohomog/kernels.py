"""Backend selection for the point-location kernels.

The compiled extension is used when it was built and importable; setting
the environment variable POROHOMOG_PURE_PYTHON=1 forces the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_compiled = None
if not os.environ.get("POROHOMOG_PURE_PYTHON"):
    try:
        from . import _ckernels as _compiled

        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels

invert_points = _impl.invert_points
locate_points = _impl.locate_points

# both implementations stay importable for benchmarks and cross-checks
python_impl = _pykernels
compiled_impl = _compiled
