import numpy as np
import pytest

from winoprune.bench import bench_layer, gradient_check, sparse_layer_weights
from winoprune.perf import LayerDims

SMALL = LayerDims(c=8, k=8, h=6, r=3, m=2, name="small")


@pytest.mark.parametrize("shape", [(1, 6, 6), (2, 7, 5)])
def test_gradient_check_small_errors(shape):
    errs = gradient_check(3, shape)
    assert set(errs) == {"w_f", "input"} and max(errs.values()) < 1e-6


def test_sparse_layer_weights_density():
    w_f, tset = sparse_layer_weights(SMALL, 0.25, seed=0)
    assert w_f.shape == (8, 8, tset.p, tset.q)
    assert np.count_nonzero(w_f) == w_f.size // 4


def test_bench_layer_counts_and_determinism():
    dense = bench_layer(SMALL, 1.0, batch=2, repeats=1)
    sparse = bench_layer(SMALL, 0.25, batch=2, repeats=1)
    assert dense["multiplications"] == 2 * SMALL.c * SMALL.k * 16 * SMALL.tiles
    assert sparse["multiplications"] == dense["multiplications"] // 4
    again = bench_layer(SMALL, 0.25, batch=2, workers=3, repeats=1)
    assert again["checksum"] == sparse["checksum"]
    assert bench_layer(SMALL, 0.25, batch=2, precision="f32", repeats=1)["checksum"] == \
        pytest.approx(sparse["checksum"], rel=1e-3, abs=1e-3)
    with pytest.raises(ValueError):
        bench_layer(SMALL, 0.25, batch=2, repeats=0)
