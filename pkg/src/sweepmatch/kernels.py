"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``SWEEPMATCH_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("SWEEPMATCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None and _active is compiled_backend else "python"

sgm_path = _active.sgm_path
bilinear_gather = _active.bilinear_gather
