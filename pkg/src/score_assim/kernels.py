"""Backend selection for the hot kernels.

The compiled extension is used when it imported cleanly; setting
``SCORE_ASSIM_PURE_PYTHON=1`` forces the NumPy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("SCORE_ASSIM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
mlp_forward = _impl.mlp_forward
mlp_forward_cache = _impl.mlp_forward_cache
mlp_backward = _impl.mlp_backward
systematic_resample = _impl.systematic_resample
lorenz96_drift = _impl.lorenz96_drift


def available_backends():
    """Mapping of backend name to kernel module for every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["cython"] = _kernels
    return out
