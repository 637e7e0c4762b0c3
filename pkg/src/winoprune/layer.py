"""Winograd layer: forward pass and the analytic backward pass.

The layer's parameters are Winograd-domain weights ``w_f`` of shape
``K x C x p x q``.  For each Winograd coordinate ``(i, j)`` the element-wise
stage is a ``(K x C) @ (C x N*T)`` matrix product, which is also how the
gradients are formed::

    dZ          = A1 @ dO_tile @ A2.T
    dW_F[:,:,i,j] = dZ[:,:,i,j] @ I_F[:,:,i,j].T
    dI_F[:,:,i,j] = W_F[:,:,i,j].T @ dZ[:,:,i,j]
    dI_tile     = B1 @ dI_F @ B2.T          (then summed over tile overlaps)

All functions take either a single ``C x H x W`` image or an ``N x C x H x W``
batch; outputs keep the same leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, ShapeError
from .reference import OpCounter
from .tensor import sandwich_last2
from .transforms import (TileGeometry, TransformSet, lift, tile_input, tile_output,
                         untile_input_grad, untile_output)


@dataclass
class ForwardCache:
    """Tensors one forward call keeps for its backward pass (batched layout)."""
    i_tiled: np.ndarray          # N x C x T x p x q
    i_f: np.ndarray              # N x C x T x p x q
    z: np.ndarray                # N x K x T x p x q
    w_f: np.ndarray
    geom: TileGeometry
    batched: bool
    grad_z: np.ndarray | None = field(default=None)


def lift_spatial_weights(w: np.ndarray, tset: TransformSet) -> np.ndarray:
    """Map ``K x C x r x s`` spatial kernels to ``K x C x p x q`` Winograd weights."""
    if w.ndim != 4:
        raise ShapeError(f"expected K x C x r x s weights, got {w.shape}")
    return lift(w, tset)


def _as_batch(img):
    if img.ndim == 3:
        return img[None], False
    if img.ndim == 4:
        return img, True
    raise ShapeError(f"expected C x H x W or N x C x H x W, got {img.shape}")


def _check_weights(w_f, tset, c_in=None):
    if w_f.ndim != 4 or w_f.shape[2:] != (tset.p, tset.q):
        raise ShapeError(f"Winograd weights {w_f.shape} do not match p x q = "
                         f"{tset.p} x {tset.q}")
    if c_in is not None and w_f.shape[1] != c_in:
        raise ShapeError(f"weights expect {w_f.shape[1]} channels, image has {c_in}")


def pointwise_matmul(w_f: np.ndarray, i_f: np.ndarray,
                     counter: OpCounter | None = None) -> np.ndarray:
    """``Z(:,:,i,j) = W_F(:,:,i,j) @ I_F(:,:,i,j)`` for every coordinate.

    ``w_f`` is ``K x C x p x q`` and ``i_f`` is ``N x C x T x p x q``.
    """
    k_out, c_in, p, q = w_f.shape
    n_img, _, n_tiles = i_f.shape[:3]
    w_mat = w_f.transpose(2, 3, 0, 1).reshape(p * q, k_out, c_in)
    x_mat = i_f.transpose(3, 4, 1, 0, 2).reshape(p * q, c_in, n_img * n_tiles)
    z = np.matmul(w_mat, x_mat)
    if counter is not None:
        counter.mul(p * q * k_out * c_in * n_img * n_tiles)
        counter.add(p * q * k_out * (c_in - 1) * n_img * n_tiles)
    return z.reshape(p, q, k_out, n_img, n_tiles).transpose(3, 2, 4, 0, 1)


def forward(img: np.ndarray, w_f: np.ndarray, tset: TransformSet,
            geom: TileGeometry | None = None, counter: OpCounter | None = None):
    """Run the Winograd layer; returns ``(output, cache)``."""
    batch, batched = _as_batch(np.asarray(img))
    geom = TileGeometry.for_image(batch.shape, tset) if geom is None else geom
    geom.check(tset)
    _check_weights(w_f, tset, batch.shape[1])
    tiles = tile_input(batch, geom)
    i_f = sandwich_last2(tset.b1, tiles, tset.b2)
    z = pointwise_matmul(w_f, i_f, counter)
    out = untile_output(sandwich_last2(tset.a1, z, tset.a2), geom)
    cache = ForwardCache(i_tiled=tiles, i_f=i_f, z=z, w_f=w_f.copy(), geom=geom,
                         batched=batched)
    return (out if batched else out[0]), cache


def backward_weights(grad_o: np.ndarray, cache: ForwardCache,
                     tset: TransformSet) -> np.ndarray:
    """Gradient of the loss w.r.t. ``w_f``; also stores dL/dZ in the cache."""
    geom = cache.geom
    grad_o = np.asarray(grad_o)
    g_batch = grad_o if cache.batched else grad_o[None]
    k_out = cache.z.shape[1]
    want = (cache.z.shape[0], k_out, geom.h_o, geom.w_o)
    if g_batch.shape != want:
        raise ConsistencyError(f"output gradient {grad_o.shape} does not match "
                               f"the cached forward pass {want}")
    d_tiles = tile_output(g_batch, geom)
    grad_z = sandwich_last2(np.ascontiguousarray(tset.a1.T), d_tiles,
                            np.ascontiguousarray(tset.a2.T))
    cache.grad_z = grad_z
    p, q = tset.p, tset.q
    n_img, _, n_tiles = grad_z.shape[:3]
    dz = grad_z.transpose(3, 4, 1, 0, 2).reshape(p * q, k_out, n_img * n_tiles)
    x = cache.i_f.transpose(3, 4, 1, 0, 2).reshape(p * q, -1, n_img * n_tiles)
    grad_w = np.matmul(dz, x.transpose(0, 2, 1))
    return np.ascontiguousarray(
        grad_w.reshape(p, q, k_out, -1).transpose(2, 3, 0, 1))


def backward_input(grad_z: np.ndarray | None, cache: ForwardCache, w_f: np.ndarray,
                   tset: TransformSet) -> np.ndarray:
    """Gradient of the loss w.r.t. the layer input.

    ``grad_z`` defaults to the dL/dZ left in the cache by
    :func:`backward_weights`.
    """
    if grad_z is None:
        grad_z = cache.grad_z
        if grad_z is None:
            raise ConsistencyError("backward_weights has not run on this cache")
    if w_f.shape != cache.w_f.shape or not np.array_equal(w_f, cache.w_f):
        raise ConsistencyError("weights differ from those used in the forward pass")
    if grad_z.shape != cache.z.shape:
        raise ConsistencyError(f"dL/dZ shape {grad_z.shape} does not match cache "
                               f"{cache.z.shape}")
    k_out, c_in, p, q = w_f.shape
    n_img, _, n_tiles = grad_z.shape[:3]
    dz = grad_z.transpose(3, 4, 1, 0, 2).reshape(p * q, k_out, n_img * n_tiles)
    w_mat = w_f.transpose(2, 3, 0, 1).reshape(p * q, k_out, c_in)
    grad_if = np.matmul(w_mat.transpose(0, 2, 1), dz)
    grad_if = grad_if.reshape(p, q, c_in, n_img, n_tiles).transpose(3, 2, 4, 0, 1)
    grad_tiles = sandwich_last2(np.ascontiguousarray(tset.b1.T), grad_if,
                                np.ascontiguousarray(tset.b2.T))
    grad_i = untile_input_grad(grad_tiles, cache.geom)
    return grad_i if cache.batched else grad_i[0]
