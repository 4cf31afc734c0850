"""Post-training analysis: mask maps, quantization shifts and band ablation."""
import numpy as np

from fatq import numerics, spectral
from fatq.quantizers import quantize
from fatq.trainer.layers import QatSettings, transformed_weight
from fatq.trainer.train import evaluate


def bin_frequency(n):
    """Distance of each DFT bin from DC, ``min(k, N - k)``."""
    k = np.arange(n)
    return np.minimum(k, n - k)


def quartile_bins(n):
    """Indices of the lowest- and highest-frequency quarter of the bins.

    Bins are ordered by :func:`bin_frequency` (ties by index) and each
    group holds ``ceil(N / 4)`` of them.
    """
    order = np.argsort(bin_frequency(n), kind="stable")
    q = max(1, -(-n // 4))
    return order[:q], order[-q:]


def layer_mask(layer, settings, target=3.0):
    """``(norms, mask)`` of one layer; generator-less layers get the initial generator."""
    s = QatSettings(mode="fp", weight_norm=settings.weight_norm)
    w_n = transformed_weight(layer, s)[1]
    spec = spectral.spectrum(w_n)
    gen = layer.generator if layer.generator is not None else spectral.init_generator(spec.norms, target)
    return spec.norms, spectral.make_mask(spec, gen).values


def mask_export(model, layer_index=None):
    """Per-layer spectral norms and mask values plus a low/high summary.

    Returns ``(tables, summary)``: ``tables[i]`` is a list of rows
    ``(filter, bin, freq, norm, mask)`` and ``summary`` has one dict per
    layer with the mean mask over the low- and high-frequency quartiles,
    followed by a ``"conv"`` row pooling the quartile bins of every
    exported convolution.
    """
    n_layers = len(model.layers)
    if layer_index is None:
        indices = range(n_layers)
    else:
        if not 0 <= layer_index < n_layers:
            raise IndexError(f"layer {layer_index} does not exist; model has layers 0..{n_layers - 1}")
        indices = [layer_index]
    tables, summary = {}, []
    pooled_low, pooled_high = [], []
    for li in indices:
        norms, mask = layer_mask(model.layers[li], model.settings)
        n = mask.shape[1]
        freq = bin_frequency(n)
        tables[li] = [
            (f, k, int(freq[k]), float(norms[f, k]), float(mask[f, k]))
            for f in range(mask.shape[0])
            for k in range(n)
        ]
        low, high = quartile_bins(n)
        if model.layers[li].kind == "conv":
            pooled_low.append(mask[:, low].ravel())
            pooled_high.append(mask[:, high].ravel())
        summary.append(
            {
                "layer": li,
                "n": n,
                "low_mean": float(mask[:, low].mean()),
                "high_mean": float(mask[:, high].mean()),
            }
        )
    if pooled_low:
        low_vals, high_vals = np.concatenate(pooled_low), np.concatenate(pooled_high)
        summary.append(
            {
                "layer": "conv",
                "n": int(low_vals.size),
                "low_mean": float(low_vals.mean()),
                "high_mean": float(high_vals.mean()),
            }
        )
    return tables, summary


def _check_same_architecture(a, b):
    shapes_a = [(l.kind, l.weight.shape) for l in a.layers]
    shapes_b = [(l.kind, l.weight.shape) for l in b.layers]
    if shapes_a != shapes_b:
        raise ValueError(f"architectures differ: {shapes_a} vs {shapes_b}")


def shift_report(fp_model, fat_model, identity_mask=False):
    """Fraction of weights whose quantized value moves once the transform is applied.

    For each layer the full-precision weights are quantized directly and
    after the transform, both with the FAT layer's threshold, bitwidth and
    mask generator. ``identity_mask`` replaces the mask with ones.
    Returns rows ``{layer, total, shifted, proportion}``.
    """
    _check_same_architecture(fp_model, fat_model)
    s = fat_model.settings
    fp_s = QatSettings(mode="fp", weight_norm=s.weight_norm)
    rows = []
    for li, (fp_layer, fat_layer) in enumerate(zip(fp_model.layers, fat_model.layers)):
        w = transformed_weight(fp_layer, fp_s)[1]
        spec = spectral.spectrum(w)
        if identity_mask:
            mask = np.ones_like(w)
        else:
            if fat_layer.generator is None:
                raise ValueError(f"layer {li} of the FAT model has no mask generator")
            mask = spectral.make_mask(spec, fat_layer.generator).values
        cfg = fat_layer.weight_cfg(s)
        q_plain = quantize(w, cfg)
        q_fat = quantize(spectral.transform(w, mask), cfg)
        shifted = int(np.count_nonzero(q_plain != q_fat))
        rows.append({"layer": li, "total": int(w.size), "shifted": shifted, "proportion": shifted / w.size})
    return rows


def band_index(n, bands):
    """Band of every bin of a length-``n`` spectrum.

    Bins ``0..N//2`` are split into ``bands`` contiguous equal-width groups
    and bin ``N - k`` shares the band of bin ``k``, so damping a band keeps
    the spectrum conjugate-symmetric and the weights real.
    """
    half = n // 2 + 1
    return (bin_frequency(n) * bands) // half


def max_bands(model):
    return max(l.weight[0].size // 2 + 1 for l in model.layers)


def damp_band(model, band, bands, damping):
    """Copy of ``model`` with band ``band`` of every layer's weights scaled by ``damping``."""
    out = model.copy()
    for layer in out.layers:
        w2 = layer.weight.reshape(layer.weight.shape[0], -1)
        sel = band_index(w2.shape[1], bands) == band
        if not sel.any():
            continue
        spec = numerics.dft_rows(w2)
        spec[:, sel] *= damping
        layer.weight = numerics.idft_rows(spec).reshape(layer.weight.shape)
        layer.touch()
    return out


def band_ablation(model, x, y, bands=32, damping=0.5):
    """Accuracy after damping each frequency band in turn, without retraining.

    Rows hold ``band, accuracy, drop`` (baseline minus accuracy) and the
    band's two places on a full-period axis of ``2 * bands`` positions laid
    out like raw DFT bins: ``natural_index`` (= band, counted up from DC)
    and its conjugate ``mirror_index`` (= 2 * bands - 1 - band). On that
    axis the highest bands meet in the centre.
    """
    if bands < 2:
        raise ValueError("need at least 2 bands")
    limit = max_bands(model)
    if bands > limit:
        raise ValueError(f"{bands} bands exceed the {limit} half-spectrum bins of the widest layer")
    if not 0.0 <= damping <= 1.0:
        raise ValueError(f"damping must lie in [0, 1], got {damping}")
    _, base = evaluate(model, x, y)
    rows = []
    for b in range(bands):
        _, acc = evaluate(damp_band(model, b, bands, damping), x, y)
        rows.append(
            {
                "band": b,
                "accuracy": acc,
                "drop": base - acc,
                "natural_index": b,
                "mirror_index": 2 * bands - 1 - b,
            }
        )
    return base, rows
