"""Uniform and power-of-two quantizers with clipping and STE gradients.

Weights are quantized with signed symmetric level sets, activations with
unsigned ones. A signed config of bitwidth ``m`` uses the ``m - 1`` bit
unsigned set mirrored about zero.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from fatq import _backend
from fatq.numerics import NumericalError

UNIFORM = "uniform"
LOGARITHMIC = "log"
SCHEMES = (UNIFORM, LOGARITHMIC)


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    scheme: str = UNIFORM
    signed: bool = True
    alpha: float = 1.0

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bitwidth must be >= 2, got {self.bits}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.alpha > 0:
            raise ValueError(f"clipping threshold must be positive, got {self.alpha}")

    def with_alpha(self, alpha):
        return QuantConfig(self.bits, self.scheme, self.signed, float(alpha))

    @property
    def levels(self):
        """Normalized level set in [0, 1] or [-1, 1]."""
        return level_set(self.bits, self.scheme, self.signed)

    @property
    def scaled_levels(self):
        return self.alpha * self.levels


def _unsigned_levels(bits, scheme):
    if scheme == UNIFORM:
        top = 2**bits - 1
        return np.arange(top + 1, dtype=np.float64) / top
    # {0, 2^(-2^m + 2), ..., 2^-1, 1}
    exps = np.arange(-(2**bits) + 2, 1, dtype=np.float64)
    return np.concatenate([[0.0], np.exp2(exps)])


@lru_cache(maxsize=None)
def _level_set_cached(bits, scheme, signed):
    if signed:
        pos = _unsigned_levels(bits - 1, scheme)
        levels = np.concatenate([-pos[:0:-1], pos])
    else:
        levels = _unsigned_levels(bits, scheme)
    levels.setflags(write=False)
    return levels


def level_set(bits, scheme=UNIFORM, signed=False):
    """Sorted normalized quantization levels for a bitwidth and scheme.

    >>> level_set(2, "uniform", signed=False).tolist()
    [0.0, 0.3333333333333333, 0.6666666666666666, 1.0]
    >>> level_set(2, "log", signed=False).tolist()
    [0.0, 0.25, 0.5, 1.0]
    """
    if bits < 2:
        raise ValueError(f"bitwidth must be >= 2, got {bits}")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    return _level_set_cached(int(bits), scheme, bool(signed))


def clip(x, cfg):
    lo = -cfg.alpha if cfg.signed else 0.0
    return np.clip(x, lo, cfg.alpha)


def quantize(x, cfg):
    """Clip to the threshold and snap to the nearest scaled level.

    Ties between two levels resolve toward the larger magnitude (round half
    away from zero). Outputs are exact members of ``cfg.scaled_levels``,
    so re-quantizing is the identity.
    """
    arr = np.asarray(x, dtype=np.float64)
    nan = np.isnan(arr)
    if nan.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.flatnonzero(nan)[0]), arr.shape))
        raise NumericalError(f"NaN input at index {idx}")
    levels = np.ascontiguousarray(cfg.scaled_levels)
    flat = np.ascontiguousarray(clip(arr, cfg).ravel())
    idx = _backend.nearest_level(flat, levels)
    return levels[idx].reshape(arr.shape)


def ste_grad_mask(x, cfg):
    """Straight-through pass mask: 1 inside the clip range, 0 outside."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.signed:
        inside = np.abs(x) < cfg.alpha
    else:
        inside = (x >= 0.0) & (x < cfg.alpha)
    return inside.astype(np.float64)


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def alpha_grad_weight(upstream, w_t, cfg):
    """d loss / d alpha_W: sum of upstream * sign(w_t) over clipped entries."""
    upstream, w_t = _check_shapes(upstream, w_t)
    clipped = np.abs(w_t) > cfg.alpha
    return float(np.sum(upstream * np.sign(w_t) * clipped))


def alpha_grad_activation(upstream, a, cfg):
    """d loss / d alpha_A for unsigned activations: upstream summed where a > alpha."""
    upstream, a = _check_shapes(upstream, a)
    return float(np.sum(upstream * (a > cfg.alpha)))
