"""Analytic quantization-error model for Laplace-distributed weights.

The expected squared error of a clipped quantizer splits into a
quantization-noise term (error inside the clip range) and a clipping-noise
term (error beyond it). Clipping noise is integrated only up to the data
amplitude ``a = max|w|`` rather than to infinity::

    clip(alpha, a, b) = 2 * int_alpha^a f(x) (x - alpha)^2 dx
                      = e^{-alpha/b} [2 b^2 - e^{-c/b} (c^2 + 2 b c + 2 b^2)],  c = a - alpha

with ``f`` the Laplace(0, b) density. Minimizing the total over ``alpha``
gives an error that depends on ``a`` alone, and it grows with ``a``.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from fatq import numerics, spectral
from fatq.quantizers import LOGARITHMIC, SCHEMES, UNIFORM, QuantConfig, quantize


@dataclass(frozen=True)
class ErrorModelParams:
    b: float
    a: float
    alpha: float
    m: int
    scheme: str = UNIFORM

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"Laplace scale must be positive, got {self.b}")
        if not 0 < self.alpha <= self.a:
            raise ValueError(f"need 0 < alpha <= a, got alpha={self.alpha}, a={self.a}")
        if self.m < 2:
            raise ValueError(f"bitwidth must be >= 2, got {self.m}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class ErrorBreakdown:
    quant_noise: float
    clip_noise: float

    @property
    def total(self):
        return self.quant_noise + self.clip_noise


class AlphaStar(NamedTuple):
    alpha: float
    boundary: bool  # True when no interior minimum exists and alpha = a


def quant_noise_uniform(alpha, m):
    """alpha^2 / (3 * 2^(2m)): uniform density on 2^m cells of width 2 alpha / 2^m."""
    return alpha * alpha / (3.0 * 4.0**m)


def _log_factor(m):
    return (1.0 + 3.0 * 2.0 ** (-3 * 2 ** (m - 1) + 4)) / 84.0


def quant_noise_log(alpha, m):
    """(alpha^2 / 84) * (1 + 3 * 2^(-3 * 2^(m-1) + 4)) for power-of-two levels."""
    return alpha * alpha * _log_factor(m)


def quant_noise(alpha, m, scheme):
    if scheme == UNIFORM:
        return quant_noise_uniform(alpha, m)
    if scheme == LOGARITHMIC:
        return quant_noise_log(alpha, m)
    raise ValueError(f"unknown scheme {scheme!r}")


def _check_clip_args(alpha, a, b):
    if not b > 0:
        raise ValueError(f"Laplace scale must be positive, got {b}")
    if not 0 <= alpha <= a:
        raise ValueError(f"need 0 <= alpha <= a, got alpha={alpha}, a={a}")


def clip_noise(alpha, a, b):
    """Closed form of ``2 * int_alpha^a f(x) (x - alpha)^2 dx`` for Laplace(0, b)."""
    _check_clip_args(alpha, a, b)
    c = a - alpha
    return float(np.exp(-alpha / b) * (2 * b * b - np.exp(-c / b) * (c * c + 2 * b * c + 2 * b * b)))


def clip_noise_quadrature(alpha, a, b):
    """The same quantity by adaptive quadrature of the defining integral."""
    _check_clip_args(alpha, a, b)
    return 2.0 * numerics.integrate(
        lambda x: np.exp(-abs(x) / b) / (2 * b) * (x - alpha) ** 2, alpha, a
    )


def total_error(p):
    """Quantization plus clipping noise for the given parameters."""
    return ErrorBreakdown(
        quant_noise=quant_noise(p.alpha, p.m, p.scheme),
        clip_noise=clip_noise(p.alpha, p.a, p.b),
    )


def total_error_value(alpha, a, b, m, scheme=UNIFORM):
    return quant_noise(alpha, m, scheme) + clip_noise(alpha, a, b)


def total_error_derivative(alpha, a, b, m, scheme=UNIFORM):
    """d total / d alpha (exact derivative of the closed forms above)."""
    if scheme == UNIFORM:
        dq = 2.0 * alpha / (3.0 * 4.0**m)
    elif scheme == LOGARITHMIC:
        dq = 2.0 * alpha * _log_factor(m)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    dclip = -2.0 * b * np.exp(-alpha / b) + 2.0 * np.exp(-a / b) * (a - alpha + b)
    return dq + dclip


def optimal_alpha(a, b, m, scheme=UNIFORM, tol=1e-10):
    """Clip threshold minimizing the total error on (0, a].

    The total is convex in alpha, so the root of its derivative is the
    unique minimizer. If the derivative is still non-positive at ``a`` the
    boundary ``a`` is returned with ``boundary=True``.
    """
    if not (a > 0 and b > 0):
        raise ValueError(f"need a > 0 and b > 0, got a={a}, b={b}")
    if m < 2:
        raise ValueError(f"bitwidth must be >= 2, got {m}")

    def g(al):
        return total_error_derivative(al, a, b, m, scheme)

    if g(a) <= 0.0:
        return AlphaStar(float(a), True)
    if g(0.0) >= 0.0:
        # only reachable through round-off for vanishing amplitudes
        return AlphaStar(float(np.nextafter(0.0, 1.0)), False)
    return AlphaStar(numerics.find_root(g, 0.0, a, tol=tol), False)


def grid_optimal_alpha(a, b, m, scheme=UNIFORM, points=100_000):
    """Brute-force argmin of the total error over an evenly spaced alpha grid."""
    grid = np.linspace(a / points, a, points)
    c = a - grid
    clip = np.exp(-grid / b) * (2 * b * b - np.exp(-c / b) * (c * c + 2 * b * c + 2 * b * b))
    total = clip + quant_noise(grid, m, scheme)
    return float(grid[int(np.argmin(total))])


def error_vs_amplitude_curve(b, m, scheme, a_grid):
    """Minimal total error ``g(a)`` for every amplitude in ``a_grid``.

    Returns a list of dicts with keys ``a, alpha_star, boundary,
    quant_noise, clip_noise, total``.
    """
    a_grid = np.asarray(a_grid, dtype=np.float64)
    if np.any(a_grid <= 0) or np.any(np.diff(a_grid) < 0):
        raise ValueError("amplitude grid must be positive and sorted")
    rows = []
    for a in a_grid:
        star = optimal_alpha(float(a), b, m, scheme)
        q = quant_noise(star.alpha, m, scheme)
        cl = clip_noise(star.alpha, float(a), b)
        rows.append(
            {
                "a": float(a),
                "alpha_star": star.alpha,
                "boundary": star.boundary,
                "quant_noise": q,
                "clip_noise": cl,
                "total": q + cl,
            }
        )
    return rows


def empirical_mse(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((x - quantize(x, cfg)) ** 2))


def empirical_optimal_alpha(x, bits, scheme=UNIFORM, signed=True, points=400):
    """Threshold minimizing the measured quantization MSE of ``x``.

    Coarse scan over (0, max|x|] followed by a bounded refinement around
    the best grid point. Returns ``(alpha, mse)``.
    """
    x = np.asarray(x, dtype=np.float64)
    amp = float(np.max(np.abs(x)))
    if amp == 0.0:
        return 1.0, 0.0

    def mse(al):
        return empirical_mse(x, QuantConfig(bits, scheme, signed, float(al)))

    grid = np.linspace(amp / points, amp, points)
    vals = np.array([mse(al) for al in grid])
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, points - 1)]
    best_alpha, best = float(grid[i]), float(vals[i])
    if hi > lo:
        res = minimize_scalar(mse, bounds=(lo, hi), method="bounded", options={"xatol": amp * 1e-7})
        if res.fun < best:
            best_alpha, best = float(res.x), float(res.fun)
    return best_alpha, best


def random_generator(rng, norms, spread=2.0):
    """Random mixing matrix whose pre-activations have spread ~``spread``."""
    c_out = norms.shape[0]
    med = float(np.median(norms)) or 1.0
    return rng.normal(0.0, spread / (med * np.sqrt(c_out)), size=(c_out, c_out))


def tightening_harness(rng, b, m, scheme=UNIFORM, trials=100, c_out=8, n=72, mask_mode="generated"):
    """Measure how often the transform shrinks amplitude and quantization MSE.

    Each trial samples a ``(c_out, n)`` Laplace(0, b) weight matrix, builds a
    mask (``generated`` from a random generator, or constant ``ones`` /
    ``half``), transforms, and records whether ``max|W_t| <= max|W|`` and
    whether the quantization MSE at each matrix's own MSE-optimal threshold
    shrinks. Comparisons allow 1e-12 relative slack for DFT round-off.

    Returns ``(summary, rows)``; nothing is asserted.
    """
    rows = []
    for t in range(trials):
        w = numerics.sample_laplace(rng, b, c_out * n).reshape(c_out, n)
        spec = spectral.spectrum(w)
        if mask_mode == "generated":
            mask = spectral.make_mask(spec, random_generator(rng, spec.norms))
        elif mask_mode == "ones":
            mask = spectral.Mask(np.ones_like(w))
        elif mask_mode == "half":
            mask = spectral.Mask(np.full_like(w, 0.5))
        else:
            raise ValueError(f"unknown mask mode {mask_mode!r}")
        w_t = spectral.transform(w, mask)
        amp_w = float(np.max(np.abs(w)))
        amp_t = float(np.max(np.abs(w_t)))
        _, mse_w = empirical_optimal_alpha(w, m, scheme)
        _, mse_t = empirical_optimal_alpha(w_t, m, scheme)
        rows.append(
            {
                "trial": t,
                "amp_w": amp_w,
                "amp_t": amp_t,
                "mse_w": mse_w,
                "mse_t": mse_t,
                "max_ok": amp_t <= amp_w * (1 + 1e-12),
                "mse_ok": mse_t <= mse_w * (1 + 1e-12),
            }
        )
    summary = {
        "trials": trials,
        "max_rate": float(np.mean([r["max_ok"] for r in rows])),
        "mse_rate": float(np.mean([r["mse_ok"] for r in rows])),
    }
    return summary, rows


def mse_transform_comparison(w, mask, betas, cfg):
    """Distortion plus quantization error for scaled weights and for the transform.

    Each row reports ``mean((W - W_t)^2) + mean((W_t - Q(W_t))^2)`` where
    ``W_t = beta * W`` for each beta, and finally the masked transform.
    """
    w = np.asarray(w, dtype=np.float64)
    candidates = []
    for beta in betas:
        if not 0 < beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {beta}")
        candidates.append((f"beta={beta:g}", float(beta), beta * w))
    candidates.append(("fat", float("nan"), spectral.transform(w, mask)))
    rows = []
    for label, beta, w_t in candidates:
        dist = float(np.mean((w - w_t) ** 2))
        qerr = empirical_mse(w_t, cfg)
        rows.append({"transform": label, "beta": beta, "distortion": dist, "quant_error": qerr, "total": dist + qerr})
    return rows
