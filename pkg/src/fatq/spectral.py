"""Learned spectral weight transform.

Each filter (row of the flattened weight matrix) is taken to the frequency
domain, scaled elementwise by a learned soft mask in (0, 1) and brought
back with the real part of the inverse DFT::

    W_t = Re(iDFT(M * DFT(W))),   M = sigmoid(G^T |DFT(W)|)

The mask generator ``G`` mixes spectral magnitudes across filters, one
frequency column at a time.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from fatq import numerics


@dataclass
class FilterMatrix:
    """A conv kernel viewed as ``(C_out, N)`` with ``N = C_in * k * k``."""

    data: np.ndarray
    shape: tuple

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        c_out = self.shape[0]
        n = int(np.prod(self.shape[1:]))
        if self.data.shape != (c_out, n):
            raise ValueError(f"data shape {self.data.shape} does not match {self.shape}")

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def c_out(self):
        return self.data.shape[0]

    @property
    def n(self):
        return self.data.shape[1]

    def unflatten(self):
        return self.data.reshape(self.shape).copy()


@dataclass
class SpectrumView:
    freq: np.ndarray
    norms: np.ndarray


@dataclass
class Mask:
    values: np.ndarray
    generator: np.ndarray = None


def flatten_weights(w4d):
    """Reshape ``(C_out, C_in, k, k)`` to ``(C_out, C_in*k*k)``, last index fastest."""
    w4d = np.asarray(w4d, dtype=np.float64)
    if w4d.ndim < 2 or min(w4d.shape) < 1:
        raise ValueError(f"expected a weight tensor with positive dims, got {w4d.shape}")
    return FilterMatrix(w4d.reshape(w4d.shape[0], -1), tuple(w4d.shape))


def _rows(w):
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D filter matrix, got shape {arr.shape}")
    return arr


def spectrum(w):
    """Per-filter DFT and its elementwise magnitudes."""
    freq = numerics.dft_rows(_rows(w))
    return SpectrumView(freq=freq, norms=np.abs(freq))


def init_generator(norms, target=3.0):
    """Scaled identity making the median pre-sigmoid activation ``target``."""
    norms = np.asarray(norms, dtype=np.float64)
    med = float(np.median(norms))
    if med <= 0.0:
        med = float(np.mean(norms)) or 1.0
    return (target / med) * np.eye(norms.shape[0])


def make_mask(spec, generator):
    """``sigmoid(generator^T @ norms)``; mixes rows, keeps columns independent."""
    norms = spec.norms if isinstance(spec, SpectrumView) else np.asarray(spec, dtype=np.float64)
    generator = np.asarray(generator, dtype=np.float64)
    c_out = norms.shape[0]
    if generator.shape != (c_out, c_out):
        raise ValueError(f"generator must be {(c_out, c_out)}, got {generator.shape}")
    return Mask(values=expit(generator.T @ norms), generator=generator)


def _mask_values(m):
    return m.values if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def transform(w, m, return_imag=False):
    """Apply the mask in the frequency domain and return the real part.

    With ``return_imag`` the discarded imaginary residue is also returned;
    it vanishes when the mask is conjugate-symmetric per row.
    """
    w = _rows(w)
    values = _mask_values(m)
    if values.shape != w.shape:
        raise ValueError(f"mask shape {values.shape} does not match weights {w.shape}")
    re, im = numerics.idft_rows(values * numerics.dft_rows(w), real_only=False)
    if return_imag:
        return re, im
    return re


def _cos_table(n):
    idx = np.outer(np.arange(n), np.arange(n)) % n
    return np.cos(2.0 * np.pi * idx / n)


def _check_index(arr, i):
    if not 0 <= i < arr.shape[0]:
        raise ValueError(f"filter index {i} out of range [0, {arr.shape[0]})")


def grad_wt_wrt_w(m, i):
    """Jacobian d W_t(i, k1) / d W(i, k2) with the mask held fixed.

    Entry (k1, k2) is ``(1/N) sum_n M(i, n) cos(2 pi (k1 - k2) n / N)``; it
    depends only on ``(k1 - k2) mod N`` and is symmetric.
    """
    values = _mask_values(m)
    _check_index(values, i)
    n = values.shape[1]
    taps = _cos_table(n) @ values[i] / n
    diff = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return taps[diff]


def grad_wt_wrt_m(w, i):
    """Jacobian d W_t(i, k1) / d M(i, k2) with the weights held fixed.

    Entry (k1, k2) is ``(1/N) sum_n W(i, n) cos(2 pi (k1 - n) k2 / N)``.
    """
    w = _rows(w)
    _check_index(w, i)
    n = w.shape[1]
    k = np.arange(n)
    # phase index (k1 - t) * k2 mod N for every (k1, k2, t)
    phase = ((k[:, None, None] - k[None, None, :]) * k[None, :, None]) % n
    return np.cos(2.0 * np.pi * phase / n) @ w[i] / n


def jacobian_tensor(w, m, wrt="w"):
    """Stack per-filter Jacobians as ``raw[i, j1, j2] = d W_t(i, j2) / d X(i, j1)``."""
    w = _rows(w)
    if wrt == "w":
        mats = [grad_wt_wrt_w(m, i) for i in range(w.shape[0])]
    elif wrt == "m":
        mats = [grad_wt_wrt_m(w, i) for i in range(w.shape[0])]
    else:
        raise ValueError(f"wrt must be 'w' or 'm', got {wrt!r}")
    return np.stack([mat.T for mat in mats])


def reduce_gradient(raw):
    """Sum a ``(C_out, N, N)`` gradient tensor over its last axis."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[1] != raw.shape[2]:
        raise ValueError(f"expected a (C_out, N, N) tensor, got {raw.shape}")
    return raw.sum(axis=2)


def _complex_dft_real(z):
    """Real part of the forward DFT of a complex row array."""
    a = numerics.dft_rows(np.ascontiguousarray(z.real))
    b = numerics.dft_rows(np.ascontiguousarray(z.imag))
    return a.real - b.imag


def backward(upstream, w, m, norm_path=True):
    """Gradients of ``sum(upstream * W_t)`` w.r.t. weights, mask and generator.

    Returns ``(grad_w, grad_m, grad_generator)``. ``grad_generator`` is None
    when ``m`` carries no generator. With ``norm_path`` the dependence of the
    mask on ``|DFT(W)|`` is also differentiated into ``grad_w``.
    """
    w = _rows(w)
    values = _mask_values(m)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != w.shape or values.shape != w.shape:
        raise ValueError(
            f"shape mismatch: upstream {upstream.shape}, weights {w.shape}, mask {values.shape}"
        )
    freq = numerics.dft_rows(w)
    up_re, up_im = numerics.idft_rows(upstream.astype(complex), real_only=False)
    up_hat = up_re + 1j * up_im

    # mask held fixed: the transform is linear in W with a symmetric kernel
    grad_w = _complex_dft_real(values * up_hat)
    grad_m = np.real(freq * up_hat)

    generator = m.generator if isinstance(m, Mask) else None
    if generator is None:
        return grad_w, grad_m, None

    norms = np.abs(freq)
    grad_z = grad_m * values * (1.0 - values)
    grad_generator = norms @ grad_z.T
    if norm_path:
        grad_norms = generator @ grad_z
        safe = np.where(norms > 0.0, norms, 1.0)
        unit = np.where(norms > 0.0, np.conj(freq) / safe, 0.0)
        grad_w = grad_w + _complex_dft_real(grad_norms * unit)
    return grad_w, grad_m, grad_generator
