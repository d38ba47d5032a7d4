"""Select the compiled kernels when available, the numpy fallback otherwise.

Set ``QOSCLUST_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
kernels = _fallback

if not os.environ.get("QOSCLUST_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        kernels = _compiled
        BACKEND = "cython"


def available_backends():
    """Map backend name -> kernel module for every importable backend."""
    found = {"python": _fallback}
    try:
        from . import _kernels as compiled

        found["cython"] = compiled
    except ImportError:
        pass
    return found
