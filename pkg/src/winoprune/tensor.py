"""Dense tensor helpers, small-matrix algebra and the WGT1 binary format.

Dense tensors are plain C-contiguous numpy arrays (float64 by default,
float32 for the inference benchmark path).  The small-matrix routines
accumulate products in a fixed left-to-right order over the inner index so
that two code paths built from them agree bit for bit; batched variants
(``sandwich_last2``) reproduce exactly the same per-element operation
sequence as ``sandwich``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFormatError, ShapeError

MAGIC = b"WGT1"
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODE_OF = {np.dtype("float64"): 1, np.dtype("float32"): 2}


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
    return arr


def _require_matrix(x, name):
    if x.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {x.shape}")


def mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed summation order over the inner index."""
    _require_matrix(a, "a")
    _require_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def transpose(a: np.ndarray) -> np.ndarray:
    _require_matrix(a, "a")
    return np.ascontiguousarray(a.T)


def sandwich(u: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Return ``u.T @ x @ v``."""
    _require_matrix(u, "u")
    _require_matrix(x, "x")
    _require_matrix(v, "v")
    if u.shape[0] != x.shape[0] or v.shape[0] != x.shape[1]:
        raise ShapeError(
            f"sandwich shapes incompatible: u {u.shape}, x {x.shape}, v {v.shape}")
    return mat_mul(mat_mul(transpose(u), x), v)


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"element-wise product of {x.shape} and {y.shape}")
    return x * y


def sandwich_last2(u: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply ``u.T @ X @ v`` to every matrix X stacked in the last two axes.

    Each output element sees the same sequence of floating point operations
    as :func:`sandwich`, whatever the leading (batch) shape is.
    """
    _require_matrix(u, "u")
    _require_matrix(v, "v")
    if x.ndim < 2 or x.shape[-2] != u.shape[0] or x.shape[-1] != v.shape[0]:
        raise ShapeError(
            f"sandwich shapes incompatible: u {u.shape}, x {x.shape}, v {v.shape}")
    dtype = np.result_type(u, x, v)
    u = u.astype(dtype, copy=False)
    v = v.astype(dtype, copy=False)
    lead = x.shape[:-2]
    # left factor: (u.T @ X)[a, j] = sum_i u[i, a] X[i, j]
    left = np.zeros(lead + (u.shape[1], x.shape[-1]), dtype=dtype)
    for i in range(u.shape[0]):
        left += u[i, :, None] * x[..., i, None, :]
    out = np.zeros(lead + (u.shape[1], v.shape[1]), dtype=dtype)
    for j in range(v.shape[0]):
        out += left[..., :, j, None] * v[j, None, :]
    return out


def flat_offset(shape, index) -> int:
    """Row-major offset of a multi-index."""
    if len(shape) != len(index):
        raise ShapeError(f"index {index} does not match shape {shape}")
    offset = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise ShapeError(f"index {index} outside shape {shape}")
        offset = offset * extent + i
    return offset


def unravel(shape, offset) -> tuple:
    index = []
    for extent in reversed(shape):
        offset, i = divmod(offset, extent)
        index.append(i)
    if offset:
        raise ShapeError(f"offset out of range for shape {shape}")
    return tuple(reversed(index))


def max_rel_error(actual, expected, floor=1e-6) -> float:
    """Largest element-wise relative error.

    The denominator is ``max(|actual|, |expected|)`` but never less than
    ``floor * max|expected|``, so entries that are negligible against the
    tensor's own scale do not dominate.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare {actual.shape} with {expected.shape}")
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    if scale == 0.0:
        return float(np.max(np.abs(actual))) if actual.size else 0.0
    denom = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor * scale)
    return float(np.max(np.abs(actual - expected) / denom))


# --- WGT1 files -------------------------------------------------------------

def encode_wgt1(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise ShapeError(f"WGT1 stores float64 or float32, not {arr.dtype}")
    if arr.ndim > 255:
        raise ShapeError("too many dimensions for WGT1")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_wgt1(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise CorruptFormatError("missing WGT1 magic")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPE_CODES:
        raise CorruptFormatError(f"unknown dtype code {code}")
    head = 6 + 4 * ndim
    if len(blob) < head:
        raise CorruptFormatError("truncated WGT1 header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    expected = head + count * dtype.itemsize
    if len(blob) != expected:
        raise CorruptFormatError(
            f"WGT1 payload is {len(blob) - head} bytes, expected {expected - head}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=head)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_wgt1(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_wgt1(arr))


def load_wgt1(path) -> np.ndarray:
    return decode_wgt1(Path(path).read_bytes())
