"""Numerical building blocks: DFT pair, seeded sampling, quadrature,
finite differences and bracketed root finding.

Complex spectra are plain ``complex128`` arrays and random state is a
``numpy.random.Generator`` (PCG64) passed explicitly to every sampler.
"""
import numpy as np
from scipy import integrate as _integrate
from scipy import optimize as _optimize

from fatq import _backend


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class BracketError(ValueError):
    """The supplied interval does not bracket a sign change."""


def make_rng(seed):
    """Seeded generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _as_rows(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def dft(x):
    """Unnormalized forward DFT: ``X[k] = sum_n x[n] exp(-2j pi k n / N)``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("dft expects a non-empty 1-D sequence")
    re, im = _backend.dft_rows(_as_rows(arr))
    return re[0] + 1j * im[0]


def idft(spectrum, imag=None):
    """Inverse DFT with a 1/N factor, returning only the real part.

    ``spectrum`` may be complex, or the real part with ``imag`` given
    separately.
    """
    if imag is None:
        spec = np.asarray(spectrum)
        re = np.real(spec).astype(np.float64)
        im = np.imag(spec).astype(np.float64)
    else:
        re = np.asarray(spectrum, dtype=np.float64)
        im = np.asarray(imag, dtype=np.float64)
        if re.shape != im.shape:
            raise ValueError(f"real/imag length mismatch: {re.shape} vs {im.shape}")
    if re.ndim != 1 or re.size == 0:
        raise ValueError("idft expects a non-empty 1-D spectrum")
    out, _ = _backend.idft_rows(_as_rows(re), _as_rows(im))
    return out[0]


def dft_rows(x):
    """Row-wise forward DFT of a 2-D real array, as a complex array."""
    re, im = _backend.dft_rows(_as_rows(x))
    return re + 1j * im


def idft_rows(spec, real_only=True):
    """Row-wise inverse DFT. Returns ``(real, imag)`` if ``real_only`` is False."""
    spec = np.asarray(spec)
    re, im = _backend.idft_rows(
        np.ascontiguousarray(spec.real, dtype=np.float64),
        np.ascontiguousarray(spec.imag, dtype=np.float64),
    )
    if real_only:
        return re
    return re, im


def sample_laplace(rng, b, n):
    """Draw ``n`` i.i.d. Laplace(0, b) samples by inverting the CDF."""
    if not b > 0:
        raise ValueError(f"Laplace scale must be positive, got {b}")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    # u strictly inside (0, 1) so neither branch hits log(0)
    u = (rng.integers(0, 2**53, size=n, dtype=np.int64) + 0.5) / 2.0**53
    return np.where(u < 0.5, b * np.log(2.0 * u), -b * np.log(2.0 * (1.0 - u)))


def finite_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian; entry (i, j) is d f_i / d x_j."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if not h > 0:
        raise ValueError("step must be positive")
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        fp = np.asarray(f(x + step), dtype=np.float64).ravel()
        fm = np.asarray(f(x - step), dtype=np.float64).ravel()
        bad = ~(np.isfinite(fp) & np.isfinite(fm))
        if bad.any():
            raise NumericalError(
                f"non-finite output {int(np.flatnonzero(bad)[0])} when perturbing input {j}"
            )
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)


def integrate(f, lo, hi):
    """Adaptive quadrature of a scalar function on [lo, hi]."""
    if lo > hi:
        raise ValueError(f"integration bounds out of order: {lo} > {hi}")
    if lo == hi:
        return 0.0
    value, _ = _integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=500)
    return float(value)


def find_root(g, lo, hi, tol=1e-12):
    """Root of ``g`` on a sign-changing bracket, with ``|g(x)| <= tol``.

    Brent's method keeps the bisection guarantee while converging
    superlinearly; the residual is checked explicitly afterwards.
    """
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        return float(lo)
    if ghi == 0.0:
        return float(hi)
    if np.sign(glo) == np.sign(ghi):
        raise BracketError(f"no sign change on [{lo}, {hi}]: g={glo:.3g}, {ghi:.3g}")
    x = _optimize.brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=1000)
    if abs(g(x)) > tol:
        raise NumericalError(f"root residual {abs(g(x)):.3g} exceeds tolerance {tol:.3g}")
    return float(x)
