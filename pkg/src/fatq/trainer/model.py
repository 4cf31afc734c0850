"""Toy CNN: conv(1->8, 3x3) -> ReLU -> conv(8->16, 3x3) -> ReLU -> GAP -> FC."""
import copy

import numpy as np

from fatq import spectral
from fatq.trainer.layers import QatLayer, QatSettings, backward_layer, forward_layer, transformed_weight


class TinyCNN:
    def __init__(self, layers, settings=None):
        self.layers = list(layers)
        self.settings = settings or QatSettings()

    @classmethod
    def create(cls, rng, n_classes=4, in_channels=1, widths=(8, 16), k=3):
        """He-initialized bias-free network."""
        layers = []
        c_in = in_channels
        for c_out in widths:
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
            layers.append(QatLayer("conv", w, padding=k // 2))
            c_in = c_out
        w = rng.normal(0.0, np.sqrt(1.0 / c_in), size=(n_classes, c_in))
        layers.append(QatLayer("fc", w))
        return cls(layers)

    def copy(self):
        return copy.deepcopy(self)

    @property
    def n_classes(self):
        return self.layers[-1].weight.shape[0]

    def forward(self, x, settings=None):
        """Logits and the caches needed by :meth:`backward`."""
        s = settings or self.settings
        layer_caches, relu_outs = [], []
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:-1]:
            z, c = forward_layer(layer, s, h)
            layer_caches.append(c)
            h = np.maximum(z, 0.0)
            relu_outs.append(h)
        pooled = h.mean(axis=(2, 3))
        logits, c = forward_layer(self.layers[-1], s, pooled)
        layer_caches.append(c)
        return logits, {"layers": layer_caches, "relu": relu_outs}

    def backward(self, g_logits, caches):
        """Per-layer gradient dicts (see :func:`backward_layer`)."""
        layer_caches, relu_outs = caches["layers"], caches["relu"]
        grads = [None] * len(self.layers)
        grads[-1] = backward_layer(self.layers[-1], layer_caches[-1], g_logits)
        g = grads[-1]["input"]
        last = relu_outs[-1]
        g = np.broadcast_to(g[:, :, None, None] / (last.shape[2] * last.shape[3]), last.shape)
        for idx in range(len(self.layers) - 2, -1, -1):
            g = g * (relu_outs[idx] > 0.0)
            grads[idx] = backward_layer(self.layers[idx], layer_caches[idx], g)
            g = grads[idx]["input"]
        return grads

    def predict(self, x, settings=None, batch=512):
        out = []
        for i in range(0, len(x), batch):
            logits, _ = self.forward(x[i : i + batch], settings)
            out.append(logits)
        return np.concatenate(out)

    def init_quantization(self, calib_x, target=3.0):
        """Initialize mask generators and clip thresholds before fine-tuning.

        Generators start as scaled identities (mask ~ sigmoid(target)),
        ``alpha_w`` as ``max|W_t|`` and ``alpha_a`` as the 99.9th percentile
        of each layer's input on a full-precision calibration pass.
        """
        fp = QatSettings(mode="fp", weight_norm=self.settings.weight_norm)
        _, caches = self.forward(calib_x, fp)
        for layer, cache in zip(self.layers, caches["layers"]):
            w_n = transformed_weight(layer, fp)[1]
            layer.generator = spectral.init_generator(spectral.spectrum(w_n).norms, target)
            if self.settings.mode == "fat":
                s = QatSettings(mode="fat", weight_norm=self.settings.weight_norm)
                w_t = transformed_weight(layer, s)[0]
            else:
                w_t = w_n
            layer.alpha_w = float(np.max(np.abs(w_t)))
            layer.alpha_a = float(np.percentile(cache["x"], 99.9))
            layer.clamp_alphas()
            layer.touch()



    def fold_for_inference(self):
        """Equivalent network that quantizes stored weights without the transform.

        Each layer keeps ``scale * W_t`` as its weight and ``scale * alpha_w``
        as its threshold; since the level sets scale linearly this gives the
        same quantized weights, so the transform is gone at inference time.
        """
        s = self.settings
        out = self.copy()
        for layer in out.layers:
            w_t, _, scale, _ = transformed_weight(layer, s)
            layer.weight = (scale * w_t).reshape(layer.weight.shape)
            layer.alpha_w = scale * layer.alpha_w
            layer.generator = None
            layer.touch()
        mode = "fp" if s.mode == "fp" else "ste"
        out.settings = QatSettings(mode=mode, bits_w=s.bits_w, bits_a=s.bits_a, scheme=s.scheme)
        return out
