"""Quantization-aware conv / fully-connected layers with manual backward.

Forward path of one layer::

    W -> [scale-normalize] -> transform (mask from generator) -> W_t
    W_q = Q(clip(W_t, -alpha_w, alpha_w))        (signed levels)
    A_q = Q(clip(A, 0, alpha_a))                 (unsigned levels)
    O   = conv(A_q, W_q)                         (no bias)

``mode`` selects ``fp`` (no quantization), ``ste`` (quantizers only) or
``fat`` (transform + quantizers). With ``surrogate=True`` the quantizers
are replaced by their clip, which is the function whose gradient the
straight-through rules describe.
"""
from dataclasses import dataclass, field

import numpy as np

from fatq import spectral
from fatq.quantizers import (
    UNIFORM,
    QuantConfig,
    alpha_grad_activation,
    alpha_grad_weight,
    clip,
    quantize,
    ste_grad_mask,
)

MODES = ("fp", "ste", "fat")
ALPHA_FLOOR = 1e-4


class StaleCacheError(RuntimeError):
    """A forward cache was used after the layer's parameters changed."""


@dataclass
class QatSettings:
    mode: str = "fp"
    bits_w: int = 4
    bits_a: int = 4
    scheme: str = UNIFORM
    norm_path: bool = True
    weight_norm: bool = False
    surrogate: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class QatLayer:
    kind: str
    weight: np.ndarray
    generator: np.ndarray = None
    alpha_w: float = 1.0
    alpha_a: float = 1.0
    stride: int = 1
    padding: int = 0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer kind must be 'conv' or 'fc', got {self.kind!r}")
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.kind == "conv" and self.weight.ndim != 4:
            raise ValueError("conv weight must be (C_out, C_in, k, k)")
        if self.kind == "fc" and self.weight.ndim != 2:
            raise ValueError("fc weight must be (C_out, C_in)")

    @property
    def c_out(self):
        return self.weight.shape[0]

    def weight_cfg(self, s):
        return QuantConfig(s.bits_w, s.scheme, signed=True, alpha=self.alpha_w)

    def act_cfg(self, s):
        return QuantConfig(s.bits_a, s.scheme, signed=False, alpha=self.alpha_a)

    def clamp_alphas(self):
        self.alpha_w = max(self.alpha_w, ALPHA_FLOOR)
        self.alpha_a = max(self.alpha_a, ALPHA_FLOOR)

    def touch(self):
        self.version += 1


# -- weight path -----------------------------------------------------------


def _scale_of(w2):
    s = float(np.std(w2))
    return s if s > 0 else 1.0


def transformed_weight(layer, s):
    """Flattened weight after normalization and (in fat mode) the transform.

    Returns ``(w_t, w_n, scale, mask)``; ``mask`` is None outside fat mode.
    """
    w2 = layer.weight.reshape(layer.c_out, -1)
    scale = _scale_of(w2) if s.weight_norm else 1.0
    w_n = w2 / scale
    if s.mode != "fat":
        return w_n, w_n, scale, None
    if layer.generator is None:
        raise ValueError("fat mode requires a mask generator")
    mask = spectral.make_mask(spectral.spectrum(w_n), layer.generator)
    return spectral.transform(w_n, mask), w_n, scale, mask


def effective_weight(layer, s):
    """Weight actually used by the layer's product, plus backward cache."""
    w_t, w_n, scale, mask = transformed_weight(layer, s)
    if s.mode == "fp":
        w_q = w_t
    elif s.surrogate:
        w_q = clip(w_t, layer.weight_cfg(s))
    else:
        w_q = quantize(w_t, layer.weight_cfg(s))
    cache = {"w_t": w_t, "w_n": w_n, "scale": scale, "mask": mask, "w_q": w_q}
    return (scale * w_q).reshape(layer.weight.shape), cache


def weight_backward(layer, s, wcache, g_eff):
    """Chain the gradient of the effective weight back to W, G and alpha_w."""
    g_eff = g_eff.reshape(layer.c_out, -1)
    scale = wcache["scale"]
    w_t, w_n = wcache["w_t"], wcache["w_n"]
    g_q = scale * g_eff
    g_alpha_w = 0.0
    if s.mode == "fp":
        g_t = g_q
    else:
        cfg = layer.weight_cfg(s)
        g_alpha_w = alpha_grad_weight(g_q, w_t, cfg)
        g_t = g_q * ste_grad_mask(w_t, cfg)
    g_gen = None
    if s.mode == "fat":
        g_n, _, g_gen = spectral.backward(g_t, w_n, wcache["mask"], norm_path=s.norm_path)
    else:
        g_n = g_t
    if s.weight_norm:
        w2 = layer.weight.reshape(layer.c_out, -1)
        g_scale = float(np.sum(g_eff * wcache["w_q"])) - float(np.sum(g_n * w_n)) / scale
        g_w = g_n / scale + g_scale * (w2 - w2.mean()) / (w2.size * scale)
    else:
        g_w = g_n
    return g_w.reshape(layer.weight.shape), g_gen, g_alpha_w


# -- activation path -------------------------------------------------------


def quantize_activation(layer, s, a):
    if s.mode == "fp":
        return a
    cfg = layer.act_cfg(s)
    return clip(a, cfg) if s.surrogate else quantize(a, cfg)


def activation_backward(layer, s, a, g_aq):
    if s.mode == "fp":
        return g_aq, 0.0
    cfg = layer.act_cfg(s)
    return g_aq * ste_grad_mask(a, cfg), alpha_grad_activation(g_aq, a, cfg)


# -- convolution via im2col ------------------------------------------------


def conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(x, k, stride, padding):
    """``(B, C, H, W)`` -> ``(B, Ho, Wo, C*k*k)`` in (C, k_row, k_col) order."""
    b, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} with padding {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for r in range(k):
        for q in range(k):
            cols[:, :, r, q] = xp[:, :, r : r + stride * ho : stride, q : q + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, ho, wo, c * k * k)


def col2im(gcols, x_shape, k, stride, padding):
    b, c, h, w = x_shape
    ho, wo = gcols.shape[1], gcols.shape[2]
    g = gcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for r in range(k):
        for q in range(k):
            gxp[:, :, r : r + stride * ho : stride, q : q + stride * wo : stride] += g[:, :, r, q]
    return gxp[:, :, padding : padding + h, padding : padding + w]


def _matmul_forward(layer, a_q, w_eff):
    if layer.kind == "fc":
        if a_q.ndim != 2 or a_q.shape[1] != w_eff.shape[1]:
            raise ValueError(f"fc input {a_q.shape} incompatible with weight {w_eff.shape}")
        return a_q @ w_eff.T, None
    c_out, c_in, k, _ = w_eff.shape
    if a_q.ndim != 4 or a_q.shape[1] != c_in:
        raise ValueError(f"conv input {a_q.shape} incompatible with weight {w_eff.shape}")
    cols = im2col(a_q, k, layer.stride, layer.padding)
    out = cols @ w_eff.reshape(c_out, -1).T
    return out.transpose(0, 3, 1, 2), cols


def forward_layer(layer, s, x):
    """Run one layer. Returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    w_eff, wcache = effective_weight(layer, s)
    a_q = quantize_activation(layer, s, x)
    out, cols = _matmul_forward(layer, a_q, w_eff)
    cache = {
        "x": x,
        "a_q": a_q,
        "cols": cols,
        "w_eff": w_eff,
        "wcache": wcache,
        "version": layer.version,
        "settings": s,
    }
    return out, cache


def backward_layer(layer, cache, upstream):
    """Gradients for the layer's weight, generator, both alphas and its input."""
    if cache["version"] != layer.version:
        raise StaleCacheError("layer parameters changed since this forward pass")
    s = cache["settings"]
    w_eff = cache["w_eff"]
    upstream = np.asarray(upstream, dtype=np.float64)
    if layer.kind == "fc":
        g_weff = upstream.T @ cache["a_q"]
        g_aq = upstream @ w_eff
    else:
        c_out, c_in, k, _ = w_eff.shape
        g2 = upstream.transpose(0, 2, 3, 1).reshape(-1, c_out)
        cols = cache["cols"]
        g_weff = (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(w_eff.shape)
        gcols = (g2 @ w_eff.reshape(c_out, -1)).reshape(cols.shape)
        g_aq = col2im(gcols, cache["x"].shape, k, layer.stride, layer.padding)
    g_w, g_gen, g_alpha_w = weight_backward(layer, s, cache["wcache"], g_weff)
    g_x, g_alpha_a = activation_backward(layer, s, cache["x"], g_aq)
    return {
        "weight": g_w,
        "generator": g_gen,
        "alpha_w": g_alpha_w,
        "alpha_a": g_alpha_a,
        "input": g_x,
    }
