"""Winograd transform matrices and the tile index maps.

A :class:`TransformSet` holds ``A1, A2, B1, B2, G1, G2`` such that, for an
``r x s`` kernel ``W`` and a ``p x q`` input tile ``D``::

    A1.T @ ((G1 @ W @ G2.T) * (B1.T @ D @ B2)) @ A2

is the ``m x n`` sliding dot product (valid correlation, no kernel flip) of
``W`` over ``D``.  :class:`TileGeometry` maps between images and overlapped
tiles: ``phi`` sends ``(tile, i, j)`` to an input pixel and ``psi`` sends an
output pixel to ``(tile, i, j)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import BoundsError, CapabilityError, ShapeError
from .tensor import sandwich_last2

# finite interpolation points, in order of use; infinity is always added
COOK_TOOM_POINTS = (
    Fraction(0), Fraction(1), Fraction(-1), Fraction(2), Fraction(-2),
    Fraction(1, 2), Fraction(-1, 2),
)
MAX_TILE = len(COOK_TOOM_POINTS) + 1


@dataclass(frozen=True, eq=False)
class TransformSet:
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    m: int
    n: int
    r: int
    s: int

    def __post_init__(self):
        p, q = self.p, self.q
        want = {
            "a1": (p, self.m), "a2": (q, self.n),
            "b1": (p, p), "b2": (q, q),
            "g1": (p, self.r), "g2": (q, self.s),
        }
        for name, shape in want.items():
            mat = getattr(self, name)
            if mat.shape != shape:
                raise ShapeError(f"{name} has shape {mat.shape}, expected {shape}")
            mat.setflags(write=False)

    @property
    def p(self) -> int:
        return self.m + self.r - 1

    @property
    def q(self) -> int:
        return self.n + self.s - 1

    def matrices(self) -> dict:
        return {"A1": self.a1, "A2": self.a2, "B1": self.b1,
                "B2": self.b2, "G1": self.g1, "G2": self.g2}

    def astype(self, dtype) -> "TransformSet":
        mats = {k: v.astype(dtype) for k, v in
                dict(a1=self.a1, a2=self.a2, b1=self.b1, b2=self.b2,
                     g1=self.g1, g2=self.g2).items()}
        return TransformSet(**mats, m=self.m, n=self.n, r=self.r, s=self.s)


def f2x2_3x3_transforms() -> TransformSet:
    """The F(2x2, 3x3) matrices with the sign conventions used in the literature."""
    a = np.array([[1, 0], [1, 1], [1, -1], [0, -1]], dtype=np.float64)
    b = np.array([[1, 0, 0, 0],
                  [0, 1, -1, 1],
                  [-1, 1, 1, 0],
                  [0, 0, 0, -1]], dtype=np.float64)
    g = np.array([[1, 0, 0],
                  [0.5, 0.5, 0.5],
                  [0.5, -0.5, 0.5],
                  [0, 0, 1]], dtype=np.float64)
    return TransformSet(a1=a, a2=a.copy(), b1=b, b2=b.copy(), g1=g, g2=g.copy(),
                        m=2, n=2, r=3, s=3)


def _vandermonde(points, cols):
    # rows: finite points then the point at infinity (leading coefficient)
    rows = [[pt ** e for e in range(cols)] for pt in points]
    rows.append([Fraction(0)] * (cols - 1) + [Fraction(1)])
    return rows


def _invert(mat):
    """Exact Gauss-Jordan inverse of a square Fraction matrix."""
    n = len(mat)
    aug = [list(row) + [Fraction(int(i == j)) for j in range(n)]
           for i, row in enumerate(mat)]
    for col in range(n):
        pivot = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = 1 / aug[col][col]
        aug[col] = [x * inv for x in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [x - f * y for x, y in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def cook_toom_1d(m: int, r: int):
    """Exact 1-D transform matrices ``(A, B, G)`` for F(m, r) as Fraction lists.

    Linear convolution of an ``r``-tap filter with an ``m``-vector is
    evaluated at ``m + r - 2`` finite points plus infinity and interpolated
    back; transposing that bilinear algorithm gives the ``m``-output
    correlation over ``m + r - 1`` inputs.  Row ``i`` of ``G`` is divided by
    ``prod_{j != i} (a_i - a_j)`` and the matching column of ``B`` multiplied
    by it, which keeps ``B`` integral for small point sets.
    """
    if m < 1 or r < 1:
        raise CapabilityError(f"F({m},{r}) needs m >= 1 and r >= 1")
    size = m + r - 1
    if size > MAX_TILE:
        raise CapabilityError(f"F({m},{r}) needs tile {size} > {MAX_TILE}")
    points = COOK_TOOM_POINTS[:size - 1]
    vand = _vandermonde(points, size)
    a_mat = _vandermonde(points, m)
    g_mat = _vandermonde(points, r)
    v_inv = _invert(vand)
    # correlation form: y = A.T [(G w) * (B.T d)] with B.T = V^-T, so B = V^-1
    b_mat = [list(row) for row in v_inv]
    scale = []
    for i, pt in enumerate(points):
        f = Fraction(1)
        for j, other in enumerate(points):
            if j != i:
                f *= pt - other
        scale.append(f)
    scale.append(Fraction(1))
    for i in range(size):
        g_mat[i] = [x / scale[i] for x in g_mat[i]]
        for row in b_mat:
            row[i] *= scale[i]
    return a_mat, b_mat, g_mat


def _to_array(rows):
    return np.array([[float(x) for x in row] for row in rows], dtype=np.float64)


def cook_toom_transforms(m: int, r: int, n: int | None = None,
                         s: int | None = None) -> TransformSet:
    """Generate F(m x n, r x s) from 1-D Cook-Toom constructions."""
    n = m if n is None else n
    s = r if s is None else s
    a1, b1, g1 = (_to_array(x) for x in cook_toom_1d(m, r))
    a2, b2, g2 = (_to_array(x) for x in cook_toom_1d(n, s))
    return TransformSet(a1=a1, a2=a2, b1=b1, b2=b2, g1=g1, g2=g2, m=m, n=n, r=r, s=s)


def make_transforms(m: int, r: int, n: int | None = None, s: int | None = None,
                    prefer_canonical: bool = True) -> TransformSet:
    """F(2x2,3x3) uses the canonical matrices; everything else is generated."""
    n = m if n is None else n
    s = r if s is None else s
    if prefer_canonical and (m, n, r, s) == (2, 2, 3, 3):
        return f2x2_3x3_transforms()
    return cook_toom_transforms(m, r, n, s)


@dataclass(frozen=True)
class TileGeometry:
    """Tiling of a ``c x h_i x w_i`` image for one transform set.

    When ``m`` does not divide ``h_o`` (or ``n`` does not divide ``w_o``) the
    image is zero padded at the bottom/right up to ``h_pad x w_pad`` and the
    extra outputs are cropped after untiling.
    """
    c: int
    h_i: int
    w_i: int
    m: int
    n: int
    r: int
    s: int
    h_o: int = field(init=False)
    w_o: int = field(init=False)
    tiles_y: int = field(init=False)
    tiles_x: int = field(init=False)

    def __post_init__(self):
        if self.h_i < self.r or self.w_i < self.s:
            raise ShapeError(
                f"image {self.h_i}x{self.w_i} smaller than kernel {self.r}x{self.s}")
        h_o = self.h_i - self.r + 1
        w_o = self.w_i - self.s + 1
        object.__setattr__(self, "h_o", h_o)
        object.__setattr__(self, "w_o", w_o)
        object.__setattr__(self, "tiles_y", math.ceil(h_o / self.m))
        object.__setattr__(self, "tiles_x", math.ceil(w_o / self.n))

    @classmethod
    def for_image(cls, shape, tset: TransformSet) -> "TileGeometry":
        c, h, w = shape[-3:]
        return cls(c=c, h_i=h, w_i=w, m=tset.m, n=tset.n, r=tset.r, s=tset.s)

    @property
    def p(self) -> int:
        return self.m + self.r - 1

    @property
    def q(self) -> int:
        return self.n + self.s - 1

    @property
    def t(self) -> int:
        return self.tiles_y * self.tiles_x

    @property
    def h_o_pad(self) -> int:
        return self.tiles_y * self.m

    @property
    def w_o_pad(self) -> int:
        return self.tiles_x * self.n

    @property
    def h_pad(self) -> int:
        return self.h_o_pad + self.r - 1

    @property
    def w_pad(self) -> int:
        return self.w_o_pad + self.s - 1

    def check(self, tset: TransformSet) -> None:
        if (self.m, self.n, self.r, self.s) != (tset.m, tset.n, tset.r, tset.s):
            raise ShapeError("tile geometry and transform set disagree on m, n, r, s")


def phi(geom: TileGeometry, t: int, i: int, j: int) -> tuple[int, int]:
    """Input pixel (in the padded image) read by element (i, j) of tile t."""
    if not (0 <= t < geom.t and 0 <= i < geom.p and 0 <= j < geom.q):
        raise BoundsError(f"phi({t}, {i}, {j}) outside geometry")
    ty, tx = divmod(t, geom.tiles_x)
    return ty * geom.m + i, tx * geom.n + j


def psi(geom: TileGeometry, i: int, j: int) -> tuple[int, int, int]:
    if not (0 <= i < geom.h_o_pad and 0 <= j < geom.w_o_pad):
        raise BoundsError(f"psi({i}, {j}) outside output")
    ty, ii = divmod(i, geom.m)
    tx, jj = divmod(j, geom.n)
    return ty * geom.tiles_x + tx, ii, jj


def psi_inverse(geom: TileGeometry, t: int, i: int, j: int) -> tuple[int, int]:
    if not (0 <= t < geom.t and 0 <= i < geom.m and 0 <= j < geom.n):
        raise BoundsError(f"psi_inverse({t}, {i}, {j}) outside geometry")
    ty, tx = divmod(t, geom.tiles_x)
    return ty * geom.m + i, tx * geom.n + j


def _check_image(img, geom):
    if img.shape[-3:] != (geom.c, geom.h_i, geom.w_i):
        raise ShapeError(
            f"image shape {img.shape} does not match geometry "
            f"{(geom.c, geom.h_i, geom.w_i)}")


def pad_image(img: np.ndarray, geom: TileGeometry) -> np.ndarray:
    _check_image(img, geom)
    extra_h = geom.h_pad - geom.h_i
    extra_w = geom.w_pad - geom.w_i
    if extra_h == 0 and extra_w == 0:
        return img
    widths = [(0, 0)] * (img.ndim - 2) + [(0, extra_h), (0, extra_w)]
    return np.pad(img, widths)


def tile_input(img: np.ndarray, geom: TileGeometry) -> np.ndarray:
    """``(..., C, Hi, Wi)`` image to ``(..., C, T, p, q)`` overlapped tiles."""
    padded = pad_image(img, geom)
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (geom.p, geom.q), axis=(-2, -1))
    windows = windows[..., ::geom.m, ::geom.n, :, :]
    lead = img.shape[:-2]
    return np.ascontiguousarray(windows).reshape(lead + (geom.t, geom.p, geom.q))


def untile_input_grad(tiled: np.ndarray, geom: TileGeometry) -> np.ndarray:
    """Sum tile gradients back onto the image; halo pixels accumulate."""
    lead = tiled.shape[:-3]
    if tiled.shape[-3:] != (geom.t, geom.p, geom.q):
        raise ShapeError(f"tiled gradient shape {tiled.shape} does not match geometry")
    out = np.zeros(lead + (geom.h_pad, geom.w_pad), dtype=tiled.dtype)
    grid = tiled.reshape(lead + (geom.tiles_y, geom.tiles_x, geom.p, geom.q))
    # fixed accumulation order: tiles row-major
    for ty in range(geom.tiles_y):
        y0 = ty * geom.m
        for tx in range(geom.tiles_x):
            x0 = tx * geom.n
            out[..., y0:y0 + geom.p, x0:x0 + geom.q] += grid[..., ty, tx, :, :]
    return out[..., :geom.h_i, :geom.w_i]


def untile_output(tiled: np.ndarray, geom: TileGeometry) -> np.ndarray:
    """``(..., K, T, m, n)`` tiles to a ``(..., K, Ho, Wo)`` image."""
    if tiled.shape[-3:] != (geom.t, geom.m, geom.n):
        raise ShapeError(f"tiled output shape {tiled.shape} does not match geometry")
    lead = tiled.shape[:-3]
    grid = tiled.reshape(lead + (geom.tiles_y, geom.tiles_x, geom.m, geom.n))
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    img = grid.transpose(perm).reshape(lead + (geom.h_o_pad, geom.w_o_pad))
    return np.ascontiguousarray(img[..., :geom.h_o, :geom.w_o])


def tile_output(img: np.ndarray, geom: TileGeometry) -> np.ndarray:
    """Partition a ``(..., K, Ho, Wo)`` image into ``(..., K, T, m, n)`` tiles.

    Padded positions are filled with zeros.
    """
    if img.shape[-2:] != (geom.h_o, geom.w_o):
        raise ShapeError(f"output shape {img.shape} does not match geometry")
    lead = img.shape[:-2]
    full = np.zeros(lead + (geom.h_o_pad, geom.w_o_pad), dtype=img.dtype)
    full[..., :geom.h_o, :geom.w_o] = img
    grid = full.reshape(lead + (geom.tiles_y, geom.m, geom.tiles_x, geom.n))
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    return np.ascontiguousarray(grid.transpose(perm)).reshape(
        lead + (geom.t, geom.m, geom.n))


def lift(w: np.ndarray, tset: TransformSet) -> np.ndarray:
    """Spatial ``(..., r, s)`` kernels to Winograd ``(..., p, q)`` via ``G1 W G2.T``."""
    if w.shape[-2:] != (tset.r, tset.s):
        raise ShapeError(f"kernel shape {w.shape[-2:]} is not {(tset.r, tset.s)}")
    return sandwich_last2(np.ascontiguousarray(tset.g1.T), w,
                          np.ascontiguousarray(tset.g2.T))

