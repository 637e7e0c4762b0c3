import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from winoprune.errors import CorruptFormatError, ShapeError
from winoprune.tensor import (as_tensor, decode_wgt1, encode_wgt1, flat_offset, hadamard,
                              load_wgt1, mat_mul, max_rel_error, sandwich, sandwich_last2,
                              save_wgt1, transpose, unravel)
from winoprune.transforms import f2x2_3x3_transforms


def test_mat_mul_hand_example():
    out = mat_mul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out, [[19, 22], [43, 50]])


def test_mat_mul_identity_and_zero():
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3))
    np.testing.assert_array_equal(mat_mul(np.eye(2), x), x)
    np.testing.assert_array_equal(mat_mul(np.zeros((4, 2)), x), np.zeros((4, 3)))


def test_mat_mul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        mat_mul(np.ones((2, 3)), np.ones((2, 3)))


def test_sandwich_with_output_transform():
    t = f2x2_3x3_transforms()
    out = sandwich(t.a1, np.ones((4, 4)), t.a2)
    np.testing.assert_array_equal(out, [[9, -3], [-3, 1]])


def test_sandwich_identity_zero_and_shape():
    x = np.random.default_rng(1).uniform(-1, 1, (3, 4))
    np.testing.assert_array_equal(sandwich(np.eye(3), x, np.eye(4)), x)
    u, v = np.ones((3, 2)), np.ones((4, 5))
    np.testing.assert_array_equal(sandwich(u, np.zeros((3, 4)), v), np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        sandwich(np.ones((2, 2)), x, np.eye(4))


def test_hadamard():
    x = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(hadamard(x, np.full((2, 2), 2.0)), [[2, 4], [6, 8]])
    np.testing.assert_array_equal(hadamard(x, np.ones((2, 2))), x)
    np.testing.assert_array_equal(hadamard(x, np.zeros((2, 2))), 0)
    with pytest.raises(ShapeError):
        hadamard(x, np.ones((2, 1)))   # no broadcasting


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mat_mul_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1, 1, (4, 4)) for _ in range(3))
    left = mat_mul(mat_mul(a, b), c)
    right = mat_mul(a, mat_mul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-12 * max(1.0, np.max(np.abs(left)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5),
       st.integers(1, 5))
def test_sandwich_is_bitwise_the_explicit_product(seed, p, m, q, n):
    rng = np.random.default_rng(seed)
    u, x, v = rng.normal(size=(p, m)), rng.normal(size=(p, q)), rng.normal(size=(q, n))
    expected = mat_mul(mat_mul(transpose(u), x), v)
    assert np.array_equal(sandwich(u, x, v), expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_batched_sandwich_matches_single(seed, batch):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    xs = rng.normal(size=(batch, 2, 4, 4))
    out = sandwich_last2(u, xs, v)
    for idx in np.ndindex(batch, 2):
        assert np.array_equal(out[idx], sandwich(u, xs[idx], v))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.data())
def test_flat_offset_round_trip(shape, data):
    shape = tuple(shape)
    offset = data.draw(st.integers(0, int(np.prod(shape)) - 1))
    index = unravel(shape, offset)
    assert flat_offset(shape, index) == offset
    assert np.ravel_multi_index(index, shape) == offset


def test_flat_offset_rejects_out_of_range():
    with pytest.raises(ShapeError):
        flat_offset((2, 3), (2, 0))
    with pytest.raises(ShapeError):
        unravel((2, 3), 6)


def test_as_tensor_rejects_empty_extents():
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))
    assert as_tensor([[1, 2]]).dtype == np.float64


def test_max_rel_error():
    assert max_rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert max_rel_error([1.1], [1.0]) == pytest.approx(0.1 / 1.1)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_wgt1_round_trip(tmp_path, dtype):
    arr = np.random.default_rng(2).normal(size=(2, 3, 4)).astype(dtype)
    save_wgt1(tmp_path / "a.wgt", arr)
    back = load_wgt1(tmp_path / "a.wgt")
    assert back.dtype == dtype and back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_wgt1_header_layout():
    blob = encode_wgt1(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert blob[:4] == b"WGT1"
    assert blob[4] == 1 and blob[5] == 2
    assert blob[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(blob) == 14 + 6 * 8
    assert blob[14 + 8:14 + 16] == np.float64(1.0).tobytes()


def test_wgt1_rejects_bad_magic_and_truncation():
    blob = encode_wgt1(np.ones((2, 2)))
    with pytest.raises(CorruptFormatError):
        decode_wgt1(b"WGT2" + blob[4:])
    with pytest.raises(CorruptFormatError):
        decode_wgt1(blob[:-1])
    with pytest.raises(CorruptFormatError):
        decode_wgt1(blob[:7])
    with pytest.raises(CorruptFormatError):
        decode_wgt1(blob[:4] + b"\x09" + blob[5:])
