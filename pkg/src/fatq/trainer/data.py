"""Bundled synthetic image dataset: noisy oriented gratings on a 16x16 grid.

Class ``c`` is a sinusoidal grating at orientation ``c * 180 / n_classes``
degrees with random spatial frequency, phase and contrast plus Gaussian
pixel noise. Everything is generated from the seed, so the dataset needs
no files on disk.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fatq.numerics import make_rng


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self):
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def _gratings(rng, n, n_classes, size, noise):
    labels = rng.integers(0, n_classes, size=n)
    theta = labels * np.pi / n_classes + rng.normal(0.0, 0.08, size=n)
    freq = rng.uniform(0.12, 0.3, size=n)
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    contrast = rng.uniform(0.25, 0.5, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    img = 0.5 + contrast[:, None, None] * np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[:, None, :, :], labels.astype(np.int64)


def make_dataset(seed=0, n_train=1024, n_test=512, n_classes=4, size=16, noise=0.35):
    rng = make_rng(seed)
    x_train, y_train = _gratings(rng, n_train, n_classes, size, noise)
    x_test, y_test = _gratings(rng, n_test, n_classes, size, noise)
    return Dataset(x_train, y_train, x_test, y_test)


def load_npz(path):
    """Load an external image set stored as ``x_train, y_train, x_test, y_test``.

    Images must be ``(n, C, H, W)`` floats in [0, 1].
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(
            f"dataset file {path} not found; omit --data to use the bundled synthetic set, "
            "or save arrays x_train/y_train/x_test/y_test with numpy.savez"
        )
    with np.load(path) as f:
        return Dataset(
            f["x_train"].astype(np.float64),
            f["y_train"].astype(np.int64),
            f["x_test"].astype(np.float64),
            f["y_test"].astype(np.int64),
        )
