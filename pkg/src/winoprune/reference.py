"""Slow, direct spatial-domain ground truth.

Convolution here is the sliding dot product ``O(k,i,j) = sum W(k,c,u,v) *
I(c,i+u,j+v)`` with no kernel flip; the F(2x2,3x3) matrices reproduce exactly
this operation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class OpCounter:
    """Running count of scalar multiplications and additions."""
    multiplications: int = 0
    additions: int = 0

    def mul(self, count: int) -> None:
        self.multiplications += int(count)

    def add(self, count: int) -> None:
        self.additions += int(count)

    def reset(self) -> None:
        self.multiplications = 0
        self.additions = 0

    def merge(self, other: "OpCounter") -> None:
        self.multiplications += other.multiplications
        self.additions += other.additions


def _check_conv_shapes(img, w):
    if img.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"expected C x H x W image and K x C x r x s kernel, "
                         f"got {img.shape} and {w.shape}")
    if img.shape[0] != w.shape[1]:
        raise ShapeError(f"image has {img.shape[0]} channels, kernel expects {w.shape[1]}")
    if img.shape[1] < w.shape[2] or img.shape[2] < w.shape[3]:
        raise ShapeError(f"image {img.shape[1:]} smaller than kernel {w.shape[2:]}")


def direct_conv(img: np.ndarray, w: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Valid, unit-stride sliding dot product of ``w`` over ``img``."""
    _check_conv_shapes(img, w)
    c_in, h_i, w_i = img.shape
    k_out, _, r, s = w.shape
    h_o, w_o = h_i - r + 1, w_i - s + 1
    out = np.zeros((k_out, h_o, w_o), dtype=np.result_type(img, w))
    for k in range(k_out):
        for c in range(c_in):
            for u in range(r):
                for v in range(s):
                    out[k] += w[k, c, u, v] * img[c, u:u + h_o, v:v + w_o]
                    if counter is not None:
                        counter.mul(h_o * w_o)
                        counter.add(h_o * w_o)
    return out


def overlapped_conv(tiled: np.ndarray, w: np.ndarray,
                    counter: OpCounter | None = None) -> np.ndarray:
    """Filter every ``p x q`` tile independently: ``C x T x p x q -> K x T x m x n``."""
    if tiled.ndim != 4 or w.ndim != 4 or tiled.shape[0] != w.shape[1]:
        raise ShapeError(f"overlapped_conv shapes {tiled.shape} and {w.shape}")
    n_tiles = tiled.shape[1]
    r, s = w.shape[2:]
    m, n = tiled.shape[2] - r + 1, tiled.shape[3] - s + 1
    if m < 1 or n < 1:
        raise ShapeError(f"tile {tiled.shape[2:]} smaller than kernel {(r, s)}")
    out = np.zeros((w.shape[0], n_tiles, m, n), dtype=np.result_type(tiled, w))
    for t in range(n_tiles):
        out[:, t] = direct_conv(tiled[:, t], w, counter)
    return out


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    The step for coordinate ``i`` is ``h * max(1, |x_i|)``.
    """
    if not h > 0:
        raise NumericError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        plus = f(x)
        flat[i] = orig - step
        minus = f(x)
        flat[i] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (plus - minus) / (2 * step)
    return grad

