"""Small feed-forward networks built from spatial or Winograd convolutions.

Every layer works on a minibatch and keeps what it needs for the backward
pass.  Parameters are addressed as ``"<layer>.<param>"``; ``Network.params``
returns the live arrays so optimizers update them in place.
"""
from __future__ import annotations

import numpy as np

from . import layer as wl
from .data import rng_stream
from .errors import CapabilityError, ShapeError
from .transforms import TransformSet, make_transforms


class SpatialConv:
    """Valid sliding-dot-product convolution with ``K x C x r x s`` kernels."""
    domain = "spatial"

    def __init__(self, name: str, w: np.ndarray, tset: TransformSet):
        self.name = name
        self.tset = tset
        self.params = {"w": w}
        self.grads = {}
        self._windows = None

    def forward(self, x):
        w = self.params["w"]
        r, s = w.shape[2:]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"{self.name}: input has {x.shape[1]} channels, "
                             f"kernels expect {w.shape[1]}")
        windows = np.lib.stride_tricks.sliding_window_view(x, (r, s), axis=(2, 3))
        self._windows = windows
        self._in_shape = x.shape
        return np.einsum("nchwuv,kcuv->nkhw", windows, w, optimize=True)

    def backward(self, grad):
        w = self.params["w"]
        r, s = w.shape[2:]
        self.grads["w"] = np.einsum("nkhw,nchwuv->kcuv", grad, self._windows,
                                    optimize=True)
        gx = np.zeros(self._in_shape, dtype=grad.dtype)
        h_o, w_o = grad.shape[2:]
        for u in range(r):
            for v in range(s):
                gx[:, :, u:u + h_o, v:v + w_o] += np.einsum(
                    "nkhw,kc->nchw", grad, w[:, :, u, v], optimize=True)
        return gx


class WinogradConv:
    """Convolution whose independent parameters are Winograd-domain weights."""
    domain = "winograd"

    def __init__(self, name: str, w_f: np.ndarray, tset: TransformSet):
        if w_f.shape[2:] != (tset.p, tset.q):
            raise ShapeError(f"{name}: weights {w_f.shape} do not fit tile "
                             f"{tset.p}x{tset.q}")
        self.name = name
        self.tset = tset
        self.params = {"w": w_f}
        self.grads = {}
        self._cache = None

    def forward(self, x):
        out, self._cache = wl.forward(x, self.params["w"], self.tset)
        return out

    def backward(self, grad):
        self.grads["w"] = wl.backward_weights(grad, self._cache, self.tset)
        return wl.backward_input(None, self._cache, self.params["w"], self.tset)


class ReLU:
    domain = None

    def __init__(self, name="relu"):
        self.name = name
        self.params = {}
        self.grads = {}

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class GlobalAvgPool:
    domain = None

    def __init__(self, name="pool"):
        self.name = name
        self.params = {}
        self.grads = {}

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class Dense:
    domain = "dense"

    def __init__(self, name: str, w: np.ndarray, b: np.ndarray):
        self.name = name
        self.params = {"w": w, "b": b}
        self.grads = {}

    def forward(self, x):
        self._x = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, grad):
        self.grads["w"] = grad.T @ self._x
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["w"]


def softmax_cross_entropy(logits, labels):
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = len(labels)
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class Network:
    def __init__(self, layers, arch: dict | None = None):
        self.layers = list(layers)
        self.arch = dict(arch or {})
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def conv_layers(self):
        return [l for l in self.layers if l.domain in ("spatial", "winograd")]

    def params(self) -> dict:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def domain_of(self, key: str):
        return self.layer(key.split(".")[0]).domain

    def forward(self, x):
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, grad):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return grad

    def loss_and_grads(self, x, y):
        loss, grad = softmax_cross_entropy(self.forward(x), y)
        self.backward(grad)
        grads = {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads.items()}
        return loss, grads

    def predict(self, x, batch_size=256):
        out = [self.forward(x[lo:lo + batch_size]).argmax(axis=1)
               for lo in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def accuracy(self, dataset) -> float:
        return float(np.mean(self.predict(dataset.x) == dataset.y))

    def copy(self) -> "Network":
        clone = build_network(self.arch, seed=0, domain=self.conv_domain())
        for key, arr in self.params().items():
            clone.params()[key][...] = arr
        return clone

    def conv_domain(self) -> str:
        domains = {l.domain for l in self.conv_layers()}
        if len(domains) != 1:
            raise CapabilityError(f"mixed convolution domains {domains}")
        return domains.pop()


DEFAULT_ARCH = {
    "in_channels": 1,
    "channels": [8, 16],
    "kernel": 3,
    "tile": 2,
    "classes": 4,
}


def arch_transforms(arch) -> TransformSet:
    return make_transforms(int(arch["tile"]), int(arch["kernel"]))


def build_network(arch: dict | None = None, seed: int = 0,
                  domain: str = "spatial") -> Network:
    """Conv -> ReLU blocks, global average pooling and a dense classifier.

    Kernels start from a He-normal spatial draw; Winograd layers receive its
    lift, so both domains start from the same function.
    """
    arch = {**DEFAULT_ARCH, **(arch or {})}
    if domain not in ("spatial", "winograd"):
        raise CapabilityError(f"unknown domain {domain!r}")
    tset = arch_transforms(arch)
    r = int(arch["kernel"])
    layers = []
    c_in = int(arch["in_channels"])
    for idx, c_out in enumerate(arch["channels"], start=1):
        name = f"conv{idx}"
        rng = rng_stream(seed, "init", name)
        w = rng.standard_normal((c_out, c_in, r, r)) * np.sqrt(2.0 / (c_in * r * r))
        if domain == "spatial":
            layers.append(SpatialConv(name, w, tset))
        else:
            layers.append(WinogradConv(name, wl.lift_spatial_weights(w, tset), tset))
        layers.append(ReLU(f"relu{idx}"))
        c_in = c_out
    layers.append(GlobalAvgPool("pool"))
    rng = rng_stream(seed, "init", "fc")
    n_cls = int(arch["classes"])
    w = rng.standard_normal((n_cls, c_in)) * np.sqrt(1.0 / c_in)
    layers.append(Dense("fc", w, np.zeros(n_cls)))
    return Network(layers, arch)
