"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports cleanly; setting
``FATQ_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from fatq import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("FATQ_PURE_PYTHON") != "1":
    try:
        from fatq import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def get(name=None):
    """Return the kernel module for ``name`` ("cython"/"python") or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        from fatq import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def dft_rows(x):
    return _impl.dft_rows(x)


def idft_rows(xr, xi):
    return _impl.idft_rows(xr, xi)


def nearest_level(x, levels):
    return _impl.nearest_level(x, levels)
