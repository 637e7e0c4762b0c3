"""Gradient checking and sparse inference benchmarking used by the CLI."""
from __future__ import annotations

import time

import numpy as np

from . import layer as wl
from .data import rng_stream
from .perf import LayerDims, flops_baseline
from .pruning import keep_top_fraction
from .reference import OpCounter, finite_diff_grad
from .sparse import compress, sparse_forward, worker_cap
from .tensor import max_rel_error
from .transforms import make_transforms

BENCH_COLUMNS = ["layer", "density", "workers", "wall_ns", "effective_gflops", "checksum"]


def gradient_check(seed: int, shape, m: int = 2, r: int = 3, k_out: int = 2,
                   h: float = 1e-5) -> dict:
    """Max relative error of the analytic Winograd-layer gradients.

    The scalar loss is ``sum(O * R)`` for a fixed random ``R``; returns
    ``{"w_f": err, "input": err}``.
    """
    c, hi, wi = shape
    tset = make_transforms(m, r)
    rng = rng_stream(seed, "grad-check")
    img = rng.standard_normal((c, hi, wi))
    w_f = rng.standard_normal((k_out, c, tset.p, tset.q))
    out, cache = wl.forward(img, w_f, tset)
    proj = rng.standard_normal(out.shape)

    grad_w = wl.backward_weights(proj, cache, tset)
    grad_i = wl.backward_input(None, cache, w_f, tset)

    def loss_w(wv):
        return float(np.sum(wl.forward(img, wv, tset)[0] * proj))

    def loss_i(iv):
        return float(np.sum(wl.forward(iv, w_f, tset)[0] * proj))

    return {"w_f": max_rel_error(grad_w, finite_diff_grad(loss_w, w_f, h)),
            "input": max_rel_error(grad_i, finite_diff_grad(loss_i, img, h))}


def sparse_layer_weights(d: LayerDims, density: float, seed: int, dtype=np.float64):
    """Random Winograd weights for ``d`` keeping ``density`` of them."""
    tset = make_transforms(d.m, d.r)
    rng = rng_stream(seed, "bench", d.name, "weights")
    w_f = rng.standard_normal((d.k, d.c, tset.p, tset.q))
    return keep_top_fraction(w_f, density).astype(dtype), tset


def bench_layer(d: LayerDims, density: float, batch: int, workers: int = 1,
                precision: str = "f64", seed: int = 0, repeats: int = 3) -> dict:
    """Time ``sparse_forward`` on an ``H x H`` output; best of ``repeats`` runs.

    ``effective_gflops`` credits the dense direct-convolution FLOP count.
    ``multiplications`` is the element-wise-stage count of one run.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    dtype = np.float32 if precision == "f32" else np.float64
    cap = worker_cap()
    workers = min(workers, cap) if cap else workers
    w_f, tset = sparse_layer_weights(d, density, seed, dtype)
    csr = compress(w_f)
    rng = rng_stream(seed, "bench", d.name, "input")
    h_in = d.h + d.r - 1
    x = rng.standard_normal((batch, d.c, h_in, h_in)).astype(dtype)

    counter = OpCounter()
    out = sparse_forward(x, csr, tset, workers=workers, counter=counter)
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        sparse_forward(x, csr, tset, workers=workers)
        elapsed = time.perf_counter_ns() - t0
        best = elapsed if best is None else min(best, elapsed)
    flops = batch * flops_baseline(d)
    return {"layer": d.name, "density": density, "workers": workers, "wall_ns": best,
            "effective_gflops": flops / max(best, 1),
            "checksum": float(np.sum(out, dtype=np.float64)),
            "multiplications": counter.multiplications}
