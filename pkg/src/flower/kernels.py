"""Kernel dispatch: the compiled extension when importable, else pure Python.

Set ``FLOWER_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("FLOWER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

sweep_z = _impl.sweep_z
gibbs_s_star = _impl.gibbs_s_star
