"""Synthetic 10-class image data standing in for a real vision task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .optim import make_rng


@dataclass
class CleanDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    image_shape: tuple[int, int]

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def make_synthetic(n_train: int = 8000, n_test: int = 2000, num_classes: int = 10,
                   image_size: int = 16, noise: float = 0.3, mix: float = 1.6,
                   border: int = 3, seed: int = 0) -> CleanDataset:
    """Images are a blurred class prototype plus a random blend of the other
    prototypes and pixel noise, clipped to [0, 1]; ``noise`` and ``mix``
    set how hard the classes are to separate. A ``border``-pixel frame is
    left black, like the background of digit images."""
    rng = make_rng(seed)
    protos = rng.normal(size=(num_classes, image_size, image_size))
    protos = np.stack([gaussian_filter(p, sigma=1.5, mode="wrap") for p in protos])
    protos /= protos.reshape(num_classes, -1).std(axis=1)[:, None, None]

    frame = np.ones((image_size, image_size), dtype=bool)
    frame[border:image_size - border, border:image_size - border] = False

    def sample(count: int):
        y = rng.integers(0, num_classes, size=count)
        blend = rng.dirichlet(np.ones(num_classes), size=count)
        distract = np.einsum("nc,chw->nhw", blend, protos)
        img = protos[y] + mix * distract + rng.normal(0.0, noise / 0.15, size=(count, image_size, image_size))
        x = np.clip(0.5 + 0.15 * img, 0.0, 1.0)
        x[:, frame] = 0.0
        return x.reshape(count, -1).astype(np.float32), y.astype(np.int64)

    x_tr, y_tr = sample(n_train)
    x_te, y_te = sample(n_test)
    return CleanDataset(x_tr, y_tr, x_te, y_te, (image_size, image_size))
