"""Closed-form FLOP counts for dense/sparse, spatial/Winograd convolution.

All counts include both multiplications and additions (factor 2).  Square
images of extent ``H`` and square ``r x r`` kernels are assumed; the
Winograd tile count per channel is ``ceil(H / m) ** 2`` so that ``m`` need
not divide ``H``.  Transform matrices are costed as dense products.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass

import numpy as np

SPARSE_INDEX_OVERHEAD = 1.5
BYTES_PER_WEIGHT = 4


@dataclass(frozen=True)
class LayerDims:
    c: int
    k: int
    h: int
    r: int
    m: int = 2
    name: str = ""

    def __post_init__(self):
        for f in ("c", "k", "h", "r", "m"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    @property
    def p(self) -> int:
        return self.r + self.m - 1

    @property
    def tiles(self) -> int:
        return math.ceil(self.h / self.m) ** 2


@dataclass(frozen=True)
class CostParams:
    alpha: float = 3.0
    x: float = 1.0

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0 <= self.x <= 1:
            raise ValueError("density x must lie in [0, 1]")


def flops_baseline(d: LayerDims):
    return 2 * d.c * d.k * d.h ** 2 * d.r ** 2


def flops_sparse(d: LayerDims, cp: CostParams):
    return 2 * (cp.alpha * cp.x) * d.c * d.k * d.h ** 2 * d.r ** 2


def _winograd(d: LayerDims, pointwise):
    p = d.p
    return 2 * (2 * d.c * p ** 2 + pointwise + d.k * d.m * (d.m + p)) * p * d.tiles


def flops_winograd(d: LayerDims):
    return _winograd(d, d.c * d.k * d.p)


def flops_sparse_winograd(d: LayerDims, cp: CostParams):
    # alpha * x is formed first so that x = 1/alpha reproduces the dense count
    return _winograd(d, (cp.alpha * cp.x) * d.c * d.k * d.p)


def crossover_density(alpha):
    """Density below which sparse Winograd beats dense Winograd."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return 1 / alpha


def weight_bytes(d: LayerDims, x: float = 1.0, winograd: bool = False,
                 sparse: bool = False) -> float:
    per_kernel = d.p ** 2 if winograd else d.r ** 2
    b = BYTES_PER_WEIGHT * d.c * d.k * per_kernel
    return b * x * SPARSE_INDEX_OVERHEAD if sparse else b


def read_layers(text: str) -> list[LayerDims]:
    """Layers from ``[name]`` sections with keys ``c``, ``k``, ``h``, ``r`` and optional ``m``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    layers = []
    for name in parser.sections():
        sec = parser[name]
        unknown = set(sec) - {"c", "k", "h", "r", "m"}
        if unknown:
            raise ValueError(f"[{name}]: unknown keys {sorted(unknown)}")
        try:
            dims = {key: int(sec[key]) for key in ("c", "k", "h", "r")}
        except KeyError as exc:
            raise ValueError(f"[{name}]: missing key {exc}") from None
        layers.append(LayerDims(**dims, m=int(sec.get("m", 2)), name=name))
    if not layers:
        raise ValueError("layer file defines no layers")
    return layers


def parse_grid(spec: str) -> list[float]:
    """``start:stop:N`` (linear), ``start:stop:logN`` or ``start:stop:log`` (20 points)."""
    try:
        start_s, stop_s, kind = spec.split(":")
        start, stop = float(start_s), float(stop_s)
    except ValueError as exc:
        raise ValueError(f"bad grid spec {spec!r}") from exc
    log = kind.startswith("log")
    count_s = kind[3:] if log else kind.removeprefix("lin")
    count = int(count_s) if count_s else 20
    if count < 1 or start <= 0 and log:
        raise ValueError(f"bad grid spec {spec!r}")
    if count == 1 or start == stop:
        return [start]
    pts = np.geomspace(start, stop, count) if log else np.linspace(start, stop, count)
    pts = [float(v) for v in pts]
    pts[0], pts[-1] = start, stop
    return pts


SPEEDUP_COLUMNS = ["layer", "m", "alpha", "x", "speedup_sparse", "speedup_winograd",
                   "speedup_sparse_winograd"]


def speedup_table(layers, x_grid, alpha, machine_balance: float | None = None):
    """One row per (layer, x): speedups over the dense spatial baseline.

    With ``machine_balance`` (FLOP/byte) each row also says whether the sparse
    Winograd layer is compute- or bandwidth-bound under a weights-only
    traffic model.
    """
    rows = []
    for d in layers:
        base = flops_baseline(d)
        wino = flops_winograd(d)
        for x in x_grid:
            cp = CostParams(alpha=alpha, x=x)
            sparse = flops_sparse(d, cp)
            sw = flops_sparse_winograd(d, cp)
            row = {
                "layer": d.name,
                "m": d.m,
                "alpha": alpha,
                "x": x,
                "speedup_sparse": base / sparse if sparse else math.inf,
                "speedup_winograd": base / wino,
                "speedup_sparse_winograd": base / sw,
            }
            if machine_balance is not None:
                traffic = weight_bytes(d, x, winograd=True, sparse=True)
                intensity = sw / traffic if traffic else math.inf
                row["arithmetic_intensity"] = intensity
                row["bound"] = "compute" if intensity >= machine_balance else "bandwidth"
            rows.append(row)
    return rows
