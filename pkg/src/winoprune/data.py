"""Seeded synthetic image-classification data.

Four classes of 12x12 patterns: a bar that is horizontal, vertical,
diagonal or anti-diagonal, placed at a random position with random length,
contrast and additive Gaussian noise.  Orientation has no fixed pixel
footprint, so a classifier has to use local spatial structure.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 12
N_CLASSES = 4


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named stream (e.g. ``("init", "conv1")``)."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng([seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *keys])


@dataclass
class Dataset:
    x: np.ndarray    # N x C x 12 x 12
    y: np.ndarray    # N, int64 labels

    def __len__(self):
        return len(self.y)

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Yield shuffled minibatches forever."""
        while True:
            order = rng.permutation(len(self))
            for lo in range(0, len(order) - batch_size + 1, batch_size):
                idx = order[lo:lo + batch_size]
                yield self.x[idx], self.y[idx]


def _bar(label, rng):
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    length = int(rng.integers(5, 10))
    dy, dx = [(0, 1), (1, 0), (1, 1), (1, -1)][label]
    # keep the whole bar on the canvas
    ys = range(0, IMAGE_SIZE - dy * (length - 1))
    if dx >= 0:
        xs = range(0, IMAGE_SIZE - dx * (length - 1))
    else:
        xs = range(length - 1, IMAGE_SIZE)
    y0 = int(rng.choice(ys))
    x0 = int(rng.choice(xs))
    for step in range(length):
        img[y0 + dy * step, x0 + dx * step] = 1.0
    return img


def synth_dataset(seed: int, n_samples: int, channels: int = 1,
                  noise: float = 0.25, split: str = "train") -> Dataset:
    if n_samples < 8:
        raise ValueError("need at least 8 samples")
    if not 1 <= channels <= 3:
        raise ValueError("channels must be 1, 2 or 3")
    rng = rng_stream(seed, "dataset", split)
    labels = np.arange(n_samples) % N_CLASSES
    labels = labels[rng.permutation(n_samples)]
    x = np.empty((n_samples, channels, IMAGE_SIZE, IMAGE_SIZE))
    for idx, label in enumerate(labels):
        pattern = _bar(int(label), rng) * rng.uniform(0.7, 1.3)
        gains = rng.uniform(0.6, 1.0, size=channels)
        x[idx] = gains[:, None, None] * pattern
    x += noise * rng.standard_normal(x.shape)
    return Dataset(x=x, y=labels.astype(np.int64))
