# Compiled kernels: direct row-wise DFT/iDFT and nearest-level quantization.
# Semantics must match fatq._fallback exactly (up to float rounding for the DFT).
import numpy as np


_TABLES = {}


def _table(Py_ssize_t n):
    """Cached ``(cos, sin)`` of 2*pi*k*t/N as (N, N) arrays, indices reduced mod N."""
    tab = _TABLES.get(n)
    if tab is None:
        idx = np.outer(np.arange(n), np.arange(n)) % n
        angle = 2.0 * np.pi * idx / n
        tab = (np.ascontiguousarray(np.cos(angle)), np.ascontiguousarray(np.sin(angle)))
        if len(_TABLES) < 64:
            _TABLES[n] = tab
    return tab


def dft_rows(const double[:, ::1] x):
    """Unnormalized forward DFT of every row, O(N^2) per row."""
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, k, t, half = n // 2 + 1
    cdef double v
    c_arr, s_arr = _table(n)
    cdef const double[:, ::1] c = c_arr
    cdef const double[:, ::1] s = s_arr
    re = np.zeros((rows, n), dtype=np.float64)
    im = np.zeros((rows, n), dtype=np.float64)
    cdef double[:, ::1] re_v = re
    cdef double[:, ::1] im_v = im
    with nogil:
        for i in range(rows):
            # accumulate one input sample at a time so the inner loop runs over
            # contiguous frequencies; real input only needs bins 0..N/2
            for t in range(n):
                v = x[i, t]
                for k in range(half):
                    re_v[i, k] += v * c[t, k]
                    im_v[i, k] -= v * s[t, k]
            for k in range(half, n):
                re_v[i, k] = re_v[i, n - k]
                im_v[i, k] = -im_v[i, n - k]
    return re, im


def idft_rows(const double[:, ::1] xr, const double[:, ::1] xi):
    """Inverse DFT (1/N factor) of every row; returns (real, imag)."""
    cdef Py_ssize_t rows = xr.shape[0], n = xr.shape[1]
    cdef Py_ssize_t i, k, t
    cdef double a, b, inv_n = 1.0 / n
    c_arr, s_arr = _table(n)
    cdef const double[:, ::1] c = c_arr
    cdef const double[:, ::1] s = s_arr
    re = np.zeros((rows, n), dtype=np.float64)
    im = np.zeros((rows, n), dtype=np.float64)
    cdef double[:, ::1] re_v = re
    cdef double[:, ::1] im_v = im
    with nogil:
        for i in range(rows):
            for k in range(n):
                a = xr[i, k] * inv_n
                b = xi[i, k] * inv_n
                for t in range(n):
                    re_v[i, t] += a * c[k, t] - b * s[k, t]
                    im_v[i, t] += a * s[k, t] + b * c[k, t]
    return re, im


def nearest_level(const double[::1] x, const double[::1] levels):
    """Index of the nearest level for each x; ties go to the larger magnitude.

    ``levels`` must be sorted ascending. ``x`` must already be clipped to
    [levels[0], levels[-1]] and free of NaN.
    """
    cdef Py_ssize_t n = x.shape[0], nl = levels.shape[0]
    cdef Py_ssize_t i, lo, hi, mid
    cdef double v, d_lo, d_hi
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] out_v = out
    with nogil:
        for i in range(n):
            v = x[i]
            # first index with levels[hi] >= v
            lo = 0
            hi = nl
            while lo < hi:
                mid = (lo + hi) >> 1
                if levels[mid] < v:
                    lo = mid + 1
                else:
                    hi = mid
            if hi == 0:
                out_v[i] = 0
                continue
            if hi == nl:
                out_v[i] = nl - 1
                continue
            d_lo = v - levels[hi - 1]
            d_hi = levels[hi] - v
            if d_lo < d_hi:
                out_v[i] = hi - 1
            elif d_hi < d_lo:
                out_v[i] = hi
            elif levels[hi] + levels[hi - 1] > 0.0:
                out_v[i] = hi
            else:
                out_v[i] = hi - 1
    return out
