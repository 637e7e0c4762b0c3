"""Sparse Winograd inference.

Weights are stored as ``p*q`` independent ``K x C`` CSR matrices, one per
Winograd coordinate.  Inference runs in three stages per image:

1. input transform into a ``(p*q) x C x T`` buffer whose tile axis is
   contiguous,
2. one sparse-times-dense product (SpMDM) per coordinate,
3. inverse transform fused with untiling, written straight into the output.

Work is split over images first and, when there are fewer images than
workers, over blocks of output channels.  Every output element is produced
by the same operation sequence regardless of the split, so results are
bitwise independent of the worker count.
"""
from __future__ import annotations

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFormatError, ShapeError
from .reference import OpCounter
from .tensor import sandwich_last2
from .transforms import TileGeometry, TransformSet, tile_input


@dataclass
class CSRMatrix:
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    n_cols: int

    @property
    def n_rows(self) -> int:
        return len(self.row_ptr) - 1

    @property
    def nnz(self) -> int:
        return len(self.values)

    def validate(self) -> None:
        rp = self.row_ptr
        if rp.ndim != 1 or len(rp) < 1 or rp[0] != 0 or rp[-1] != len(self.values):
            raise CorruptFormatError("row_ptr must start at 0 and end at nnz")
        if len(self.col_idx) != len(self.values):
            raise CorruptFormatError("col_idx and values differ in length")
        if np.any(np.diff(rp) < 0):
            raise CorruptFormatError("row_ptr is decreasing")
        if self.nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols):
            raise CorruptFormatError("column index out of bounds")
        for k in range(self.n_rows):
            cols = self.col_idx[rp[k]:rp[k + 1]]
            if np.any(np.diff(cols) <= 0):
                raise CorruptFormatError(f"row {k} columns not strictly increasing")

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=self.values.dtype)
        for k in range(self.n_rows):
            lo, hi = self.row_ptr[k], self.row_ptr[k + 1]
            out[k, self.col_idx[lo:hi]] = self.values[lo:hi]
        return out

    @classmethod
    def from_dense(cls, mat: np.ndarray, zero_tol: float = 0.0) -> "CSRMatrix":
        keep = np.abs(mat) > zero_tol
        rows, cols = np.nonzero(keep)
        row_ptr = np.zeros(mat.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=mat.shape[0]), out=row_ptr[1:])
        return cls(row_ptr=row_ptr, col_idx=cols.astype(np.int64),
                   values=np.ascontiguousarray(mat[rows, cols]), n_cols=mat.shape[1])


@dataclass
class PointwiseCSR:
    """``p*q`` CSR slices, slice ``i*q + j`` holding ``W_F[:, :, i, j]``."""
    slices: list
    k: int
    c: int
    p: int
    q: int

    @property
    def nnz(self) -> int:
        return sum(s.nnz for s in self.slices)

    def slice(self, i: int, j: int) -> CSRMatrix:
        return self.slices[i * self.q + j]

    def validate(self) -> None:
        if len(self.slices) != self.p * self.q:
            raise CorruptFormatError(f"{len(self.slices)} slices for p*q = {self.p * self.q}")
        for s in self.slices:
            if s.n_rows != self.k or s.n_cols != self.c:
                raise CorruptFormatError("slice shape does not match K x C")
            s.validate()

    def to_dense(self) -> np.ndarray:
        dtype = self.slices[0].values.dtype if self.slices else np.float64
        out = np.zeros((self.k, self.c, self.p, self.q), dtype=dtype)
        for idx, s in enumerate(self.slices):
            i, j = divmod(idx, self.q)
            out[:, :, i, j] = s.to_dense()
        return out

    def astype(self, dtype) -> "PointwiseCSR":
        return PointwiseCSR(
            slices=[CSRMatrix(s.row_ptr, s.col_idx, s.values.astype(dtype), s.n_cols)
                    for s in self.slices],
            k=self.k, c=self.c, p=self.p, q=self.q)


def compress(w_f: np.ndarray, zero_tol: float = 0.0) -> PointwiseCSR:
    """Drop entries with ``|w| <= zero_tol`` and store each coordinate as CSR."""
    if zero_tol < 0:
        raise ValueError("zero_tol must be non-negative")
    if w_f.ndim != 4:
        raise ShapeError(f"expected K x C x p x q weights, got {w_f.shape}")
    k, c, p, q = w_f.shape
    slices = [CSRMatrix.from_dense(w_f[:, :, i, j], zero_tol)
              for i in range(p) for j in range(q)]
    return PointwiseCSR(slices=slices, k=k, c=c, p=p, q=q)


def density(csr: PointwiseCSR) -> float:
    total = csr.k * csr.c * csr.p * csr.q
    return csr.nnz / total if total else 0.0


def spmdm(mat: CSRMatrix, dense: np.ndarray, rows: tuple[int, int] | None = None,
          counter: OpCounter | None = None) -> np.ndarray:
    """Sparse ``K x C`` times dense ``C x T``.

    Row ``k`` accumulates its stored entries left to right; each step is a
    contiguous axpy over the tile axis.  ``rows`` restricts the product to a
    half-open block of output rows.
    """
    if dense.ndim != 2 or dense.shape[0] != mat.n_cols:
        raise ShapeError(f"dense operand {dense.shape} does not match {mat.n_cols} columns")
    lo, hi = (0, mat.n_rows) if rows is None else rows
    n_tiles = dense.shape[1]
    out = np.zeros((hi - lo, n_tiles), dtype=np.result_type(mat.values, dense))
    if mat.nnz and (mat.col_idx.min() < 0 or mat.col_idx.max() >= mat.n_cols):
        raise CorruptFormatError("column index out of bounds")
    starts = mat.row_ptr[lo:hi]
    lengths = mat.row_ptr[lo + 1:hi + 1] - starts
    if np.any(lengths < 0):
        raise CorruptFormatError("row_ptr is decreasing")
    longest = int(lengths.max()) if len(lengths) else 0
    # step j adds the j-th stored entry of every row that has one
    for j in range(longest):
        active = np.nonzero(lengths > j)[0]
        pos = starts[active] + j
        out[active] += mat.values[pos, None] * dense[mat.col_idx[pos]]
        if counter is not None:
            counter.mul(len(active) * n_tiles)
            counter.add(len(active) * n_tiles)
    return out


def transform_input(img: np.ndarray, tset: TransformSet, geom: TileGeometry) -> np.ndarray:
    """One image to the ``(p*q) x C x T`` tile-contiguous Winograd layout."""
    tiles = tile_input(img, geom)                      # C x T x p x q
    i_f = sandwich_last2(tset.b1, tiles, tset.b2)
    return np.ascontiguousarray(i_f.transpose(2, 3, 0, 1)).reshape(
        geom.p * geom.q, geom.c, geom.t)


def _inverse_into(out, z, tset, geom, k_lo):
    """Fused inverse transform and untiling of ``z`` (``p x q x Kb x T``)."""
    p, q = geom.p, geom.q
    kb = z.shape[2]
    m, n = geom.m, geom.n
    # left = A1.T @ Z over i, then right = left @ A2 over j, fixed order
    left = np.zeros((m, q, kb, geom.t), dtype=z.dtype)
    for i in range(p):
        left += tset.a1[i, :, None, None, None] * z[i][None]
    tiles = np.zeros((m, n, kb, geom.t), dtype=z.dtype)
    for j in range(q):
        tiles += left[:, j, None] * tset.a2[j, None, :, None, None]
    grid = tiles.reshape(m, n, kb, geom.tiles_y, geom.tiles_x)
    full = grid.transpose(2, 3, 0, 4, 1).reshape(kb, geom.h_o_pad, geom.w_o_pad)
    out[k_lo:k_lo + kb] = full[:, :geom.h_o, :geom.w_o]


def _image_block(layout, csr, tset, geom, out, k_lo, k_hi):
    counter = OpCounter()
    pq = geom.p * geom.q
    z = np.empty((geom.p, geom.q, k_hi - k_lo, geom.t), dtype=out.dtype)
    for idx in range(pq):
        i, j = divmod(idx, geom.q)
        z[i, j] = spmdm(csr.slices[idx], layout[idx], (k_lo, k_hi), counter)
    _inverse_into(out, z, tset, geom, k_lo)
    return counter


def worker_cap() -> int | None:
    """Upper bound on workers from ``WINO_THREADS``, or None when unset."""
    env = os.environ.get("WINO_THREADS")
    return max(1, int(env)) if env else None


def _plan(n_img, k_out, workers):
    if n_img >= workers or k_out == 1:
        return [(n, 0, k_out) for n in range(n_img)]
    per_image = max(1, min(k_out, -(-workers // n_img)))
    bounds = np.linspace(0, k_out, per_image + 1).round().astype(int)
    return [(n, int(lo), int(hi)) for n in range(n_img)
            for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def sparse_forward(batch: np.ndarray, csr: PointwiseCSR, tset: TransformSet,
                   geom: TileGeometry | None = None, workers: int = 1,
                   counter: OpCounter | None = None) -> np.ndarray:
    """Sparse Winograd convolution of an ``N x C x Hi x Wi`` batch.

    Arithmetic runs in the batch's precision (float32 or float64); the CSR
    values and transforms are cast to match.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ShapeError(f"expected N x C x H x W batch, got {batch.shape}")
    geom = TileGeometry.for_image(batch.shape, tset) if geom is None else geom
    geom.check(tset)
    if (csr.c, csr.p, csr.q) != (batch.shape[1], tset.p, tset.q):
        raise ShapeError(f"CSR weights {(csr.k, csr.c, csr.p, csr.q)} do not match "
                         f"input {batch.shape} and tile {tset.p}x{tset.q}")
    csr.validate()
    dtype = batch.dtype if batch.dtype in (np.float32, np.float64) else np.float64
    batch = batch.astype(dtype, copy=False)
    tset = tset.astype(dtype)
    csr = csr.astype(dtype)
    n_img = batch.shape[0]
    out = np.zeros((n_img, csr.k, geom.h_o, geom.w_o), dtype=dtype)
    cap = worker_cap()
    workers = max(1, workers if cap is None else min(workers, cap))

    layouts = [None] * n_img

    def prepare(n):
        layouts[n] = transform_input(batch[n], tset, geom)

    tasks = _plan(n_img, csr.k, workers)
    counters = []
    if workers == 1:
        for n in range(n_img):
            prepare(n)
        for n, lo, hi in tasks:
            counters.append(_image_block(layouts[n], csr, tset, geom, out[n], lo, hi))
    else:
        # each worker reads its own replica of the weights
        replicas = [copy.deepcopy(csr) for _ in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(prepare, range(n_img)))
            futures = [pool.submit(_image_block, layouts[n], replicas[idx % workers],
                                   tset, geom, out[n], lo, hi)
                       for idx, (n, lo, hi) in enumerate(tasks)]
            counters = [f.result() for f in futures]
    if counter is not None:
        for c in counters:
            counter.merge(c)
    return out
