"""Finite-difference verification of the transform Jacobians and of full backprop.

Every check yields :class:`CheckResult` rows. The relative error of a
check is ``max|analytic - numeric| / max(max|numeric|, floor)`` and the
reported index is where the absolute difference peaks.
"""
from dataclasses import dataclass

import numpy as np

from fatq import spectral
from fatq.numerics import finite_diff_jacobian
from fatq.quantizers import LOGARITHMIC, UNIFORM
from fatq.trainer.layers import QatSettings, forward_layer, transformed_weight
from fatq.trainer.model import TinyCNN
from fatq.trainer.train import softmax_xent

JACOBIAN_TOL = 1e-5
END_TO_END_TOL = 1e-4
REALNESS_TOL = 1e-10
_FLOOR = 1e-8


@dataclass
class CheckResult:
    module: str
    instance: int
    n: int
    index: tuple
    rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(self.rel_err <= self.tol)


def relative_error(analytic, numeric):
    """``(rel_err, index)`` with the index of the largest absolute difference."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    scale = max(float(np.max(np.abs(numeric))), _FLOOR)
    return float(diff[idx]) / scale, tuple(int(i) for i in idx)


def random_symmetric_mask(rng, c_out, n):
    """A mask produced the way training produces one: sigmoid of mixed norms."""
    w = rng.normal(size=(c_out, n))
    spec = spectral.spectrum(w)
    med = float(np.median(spec.norms)) or 1.0
    gen = rng.normal(0.0, 2.0 / (med * np.sqrt(c_out)), size=(c_out, c_out))
    return spectral.make_mask(spec, gen).values


def asymmetric_mask(rng, c_out, n):
    """Negative-control fixture: i.i.d. uniform entries, no conjugate symmetry."""
    return rng.uniform(0.05, 0.95, size=(c_out, n))


def _filter_fd(fn, x_row):
    # columns of the finite-difference Jacobian are d out / d x_j; transpose to
    # the (input, output) layout used by spectral.jacobian_tensor
    return finite_diff_jacobian(fn, x_row).T


def check_transform(rng, n, instance, c_out=2, mask_fn=random_symmetric_mask):
    """Jacobians w.r.t. weights and mask plus the realness of the transform."""
    w = rng.normal(size=(c_out, n))
    m = mask_fn(rng, c_out, n)
    out = []
    i = int(rng.integers(0, c_out))

    def wrt_w(row):
        ww = w.copy()
        ww[i] = row
        return spectral.transform(ww, m)[i]

    def wrt_m(row):
        mm = m.copy()
        mm[i] = row
        return spectral.transform(w, mm)[i]

    for name, fn, x, wrt in (("jacobian_w", wrt_w, w[i], "w"), ("jacobian_m", wrt_m, m[i], "m")):
        analytic = spectral.jacobian_tensor(w, m, wrt)[i]
        err, idx = relative_error(analytic, _filter_fd(fn, x))
        out.append(CheckResult(name, instance, n, (i,) + idx, err, JACOBIAN_TOL))

    re, im = spectral.transform(w, m, return_imag=True)
    idx = tuple(int(j) for j in np.unravel_index(int(np.argmax(np.abs(im))), im.shape))
    err = float(np.max(np.abs(im))) / max(float(np.max(np.abs(re))), _FLOOR)
    out.append(CheckResult("realness", instance, n, idx, err, REALNESS_TOL))
    return out


def _param_slots(model, settings):
    slots = []
    for li, layer in enumerate(model.layers):
        slots.append((li, "weight"))
        if settings.mode == "fat":
            slots.append((li, "generator"))
        if settings.mode != "fp":
            slots.append((li, "alpha_w"))
            slots.append((li, "alpha_a"))
    return slots


def _get(layer, attr):
    return np.atleast_1d(np.asarray(getattr(layer, attr), dtype=np.float64)).ravel().copy()


def _set(layer, attr, flat):
    cur = getattr(layer, attr)
    if np.isscalar(cur) or np.ndim(cur) == 0:
        setattr(layer, attr, float(flat[0]))
    else:
        setattr(layer, attr, flat.reshape(np.shape(cur)).copy())
    layer.touch()


def kink_margin(model, x):
    """Smallest distance of any ReLU input or clip argument to its kink."""
    s = model.settings
    margins = []
    h = np.asarray(x, dtype=np.float64)
    for li, layer in enumerate(model.layers):
        if s.mode != "fp":
            w_t = transformed_weight(layer, s)[0]
            margins.append(np.min(np.abs(np.abs(w_t) - layer.alpha_w)))
            margins.append(np.min(np.abs(h - layer.alpha_a)))
        z, _ = forward_layer(layer, s, h)
        if li < len(model.layers) - 1:
            margins.append(np.min(np.abs(z)))
            h = np.maximum(z, 0.0)
            if li == len(model.layers) - 2:
                h = h.mean(axis=(2, 3))
    return float(min(margins))


def _prepare(rng, settings, widths, n_classes, size, batch):
    model = TinyCNN.create(rng, n_classes=n_classes, widths=widths)
    x = rng.uniform(0.0, 1.0, size=(batch, 1, size, size))
    y = rng.integers(0, n_classes, size=batch)
    model.settings = settings
    if settings.mode != "fp":
        model.init_quantization(x)
        _, caches = model.forward(x, QatSettings(mode="fp", weight_norm=settings.weight_norm))
        for layer, cache in zip(model.layers, caches["layers"]):
            if layer.generator is not None:
                noise = rng.normal(0.0, 0.3 * layer.generator[0, 0], size=layer.generator.shape)
                layer.generator = layer.generator + noise
            w_t = transformed_weight(layer, settings)[0]
            layer.alpha_w = float(np.max(np.abs(w_t))) * rng.uniform(0.6, 0.9)
            layer.alpha_a = float(np.max(cache["x"])) * rng.uniform(0.6, 0.9)
            layer.touch()
    return model, x, y


def small_model(rng, settings, widths=(2, 3), n_classes=3, size=5, batch=3, margin=1e-4):
    """A tiny network prepared for gradchecking in ``settings``.

    Finite differences are only meaningful where the loss is smooth, so
    draws whose ReLU inputs or clip arguments lie within ``margin`` of a
    kink are rejected and redrawn.
    """
    for _ in range(100):
        model, x, y = _prepare(rng, settings, widths, n_classes, size, batch)
        if kink_margin(model, x) > margin:
            return model, x, y
    raise RuntimeError("could not draw a kink-free gradcheck fixture")


def check_end_to_end(rng, settings, instance):
    """Compare every parameter gradient of a small network with finite differences."""
    model, x, y = small_model(rng, settings)
    logits, caches = model.forward(x)
    _, g = softmax_xent(logits, y)
    grads = model.backward(g, caches)
    out = []
    for li, attr in _param_slots(model, settings):
        layer = model.layers[li]
        base = _get(layer, attr)
        analytic = np.atleast_1d(np.asarray(grads[li][attr], dtype=np.float64)).ravel()

        def loss_at(flat, layer=layer, attr=attr):
            _set(layer, attr, flat)
            return [softmax_xent(model.forward(x)[0], y)[0]]

        numeric = finite_diff_jacobian(loss_at, base)[0]
        _set(layer, attr, base)
        err, idx = relative_error(analytic, numeric)
        label = f"end_to_end[{settings.mode}].layer{li}.{attr}"
        out.append(CheckResult(label, instance, base.size, idx, err, END_TO_END_TOL))
    return out


def end_to_end_settings(instance):
    """Cycle quantizer options over instances so every path gets covered.

    The norm path stays on: without it the weight gradient deliberately
    omits the mask's dependence on the weights and is not the true gradient.
    """
    scheme = (UNIFORM, LOGARITHMIC)[instance % 2]
    return QatSettings(
        mode="fat",
        bits_w=3 + instance % 3,
        bits_a=3 + (instance // 3) % 3,
        scheme=scheme,
        weight_norm=(instance // 2) % 2 == 1,
        surrogate=True,
    )


def run_suite(rng, sizes=(1, 2, 4, 8, 9, 16, 72), instances=50, end_to_end=50, fixture=None):
    """Run all checks; returns the list of :class:`CheckResult`.

    ``fixture="asymmetric-mask"`` swaps in masks without conjugate symmetry,
    a negative control that must trip the realness check.
    """
    if fixture not in (None, "asymmetric-mask"):
        raise ValueError(f"unknown fixture {fixture!r}")
    if not sizes or min(sizes) < 1:
        raise ValueError("sizes must be positive integers")
    mask_fn = asymmetric_mask if fixture else random_symmetric_mask
    results = []
    for inst in range(instances):
        n = int(sizes[inst % len(sizes)])
        results.extend(check_transform(rng, n, inst, mask_fn=mask_fn))
    for inst in range(end_to_end):
        results.extend(check_end_to_end(rng, end_to_end_settings(inst), inst))
    for inst, mode in enumerate(("fp", "ste")):
        results.extend(check_end_to_end(rng, QatSettings(mode=mode, surrogate=True), inst))
    return results


def worst(results):
    """The failing result with the largest error relative to its tolerance."""
    return max(results, key=lambda r: r.rel_err / r.tol)
