"""Pure-numpy implementations of the compiled kernels in ``_kernels.pyx``."""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _dft_matrix(n):
    # exact index reduction keeps the twiddles accurate for large k*t
    idx = np.outer(np.arange(n), np.arange(n)) % n
    angle = 2.0 * np.pi * idx / n
    mat = np.cos(angle) - 1j * np.sin(angle)
    mat.setflags(write=False)
    return mat


def dft_rows(x):
    f = _dft_matrix(x.shape[1])
    out = x @ f
    return np.ascontiguousarray(out.real), np.ascontiguousarray(out.imag)


def idft_rows(xr, xi):
    n = xr.shape[1]
    f = _dft_matrix(n)
    out = ((xr + 1j * xi) @ f.conj()) / n
    return np.ascontiguousarray(out.real), np.ascontiguousarray(out.imag)


def nearest_level(x, levels):
    nl = levels.shape[0]
    hi = np.searchsorted(levels, x, side="left")
    hi_c = np.clip(hi, 1, nl - 1)
    lo_c = hi_c - 1
    d_lo = x - levels[lo_c]
    d_hi = levels[hi_c] - x
    upper_on_tie = (levels[hi_c] + levels[lo_c]) > 0.0
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & upper_on_tie)
    out = np.where(pick_hi, hi_c, lo_c)
    out = np.where(hi == 0, 0, out)
    out = np.where(hi == nl, nl - 1, out)
    return out.astype(np.intp)
