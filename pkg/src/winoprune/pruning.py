"""Training, Winograd-domain pruning and mask-fixed fine-tuning.

Models only need ``params()`` (live arrays keyed ``"<layer>.<param>"``),
``loss_and_grads(x, y)`` and ``domain_of(key)``; :class:`~.network.Network`
provides all three.  Regularization strengths ``lambdas`` and norms are
per layer and act on the layer's ``w`` parameter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, InvariantError, NumericError, TrainingError
from .network import Dense, GlobalAvgPool, Network, ReLU, SpatialConv, WinogradConv
from .tensor import sandwich_last2
from .transforms import TransformSet, lift


@dataclass
class PruneConfig:
    eps: float = 1e-4
    beta: float = 0.1
    lambdas: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    lr: float = 0.05
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    winograd_lr_mult: float = 1.0
    momentum: float = 0.0
    batch_size: int = 32
    seed: int = 0
    # layers thresholded during pruning; None means those with lambda > 0
    threshold_layers: tuple | None = None

    def __post_init__(self):
        # eps == 0 switches thresholding off
        if self.eps < 0 or self.beta <= 0:
            raise ValueError("need eps >= 0 and beta > 0")
        for name, lam in self.lambdas.items():
            if lam < 0:
                raise ValueError(f"lambda for {name} is negative")
        for name, p in self.norms.items():
            if p not in (1, 2):
                raise ValueError(f"norm for {name} must be 1 or 2")

    def lr_at(self, step: int) -> float:
        if self.lr_decay_every:
            return self.lr * self.lr_decay ** (step // self.lr_decay_every)
        return self.lr

    def lam(self, layer: str) -> float:
        return float(self.lambdas.get(layer, 0.0))

    def norm(self, layer: str) -> int:
        return int(self.norms.get(layer, 1))

    def thresholded(self, layer: str) -> bool:
        if self.threshold_layers is None:
            return self.lam(layer) > 0
        return layer in self.threshold_layers


def _regularized(key: str, cfg: PruneConfig):
    layer, _, param = key.partition(".")
    return param == "w" and cfg.lam(layer) > 0


def norm_value(w: np.ndarray, p: int) -> float:
    if p == 1:
        return float(np.sum(np.abs(w)))
    return float(np.sqrt(np.sum(w * w)))


def norm_grad(w: np.ndarray, p: int) -> np.ndarray:
    """(Sub)gradient of ``||w||_p``; zero at exact zeros."""
    if p == 1:
        return np.sign(w)
    nrm = np.sqrt(np.sum(w * w))
    return w / nrm if nrm > 0 else np.zeros_like(w)


def energy(theta: dict, loss: float, cfg: PruneConfig) -> float:
    """``loss + sum_l lambda_l * ||w_l||_{p_l}`` over layer weights ``theta``."""
    if not math.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    total = loss
    for layer, w in theta.items():
        lam = cfg.lam(layer)
        if lam:
            total += lam * norm_value(w, cfg.norm(layer))
    return total


def threshold(w, g, eps: float, beta: float):
    """Zero entries with ``|w| * (|g| + beta) < eps``; keep the rest unchanged."""
    w = np.asarray(w)
    drop = np.abs(w) * (np.abs(g) + beta) < eps
    return np.where(drop, np.zeros_like(w), w)


def _lr_for(model, key, cfg, step):
    lr = cfg.lr_at(step)
    if model.domain_of(key) == "winograd":
        lr *= cfg.winograd_lr_mult
    return lr


def _check_finite(key, arr, step):
    if not np.all(np.isfinite(arr)):
        raise TrainingError(f"parameter {key} became non-finite", step)


def prune_step(model, batch, cfg: PruneConfig, step: int = 0) -> float:
    """One regularized SGD step followed by gradient-based thresholding.

    Thresholding applies to the layers selected by ``cfg.thresholded`` (by
    default those with a positive lambda) and uses the minibatch loss
    gradient computed for this step.  Returns the loss.
    """
    x, y = batch
    loss, grads = model.loss_and_grads(x, y)
    if not math.isfinite(loss):
        raise TrainingError("loss is not finite", step)
    for key, w in model.params().items():
        g = grads[key]
        update = g
        layer = key.partition(".")[0]
        if _regularized(key, cfg):
            update = g + cfg.lam(layer) * norm_grad(w, cfg.norm(layer))
        w_tmp = w - _lr_for(model, key, cfg, step) * update
        if key.endswith(".w") and cfg.thresholded(layer) and cfg.eps > 0:
            w_tmp = threshold(w_tmp, g, cfg.eps, cfg.beta)
        _check_finite(key, w_tmp, step)
        w[...] = w_tmp
    return loss


def winograd_l1(w: np.ndarray, tset: TransformSet) -> tuple[float, np.ndarray]:
    """``||G1 W G2^T||_1`` summed over kernels, and its gradient w.r.t. ``W``.

    The gradient is the pullback ``G1^T sign(G1 W G2^T) G2``.
    """
    lifted = lift(w, tset)
    grad = sandwich_last2(tset.g1, np.sign(lifted), tset.g2)
    return float(np.sum(np.abs(lifted))), grad


def sgd_step(model, batch, cfg: PruneConfig, step: int = 0, *,
             penalty: str = "norm", mask: dict | None = None,
             velocity: dict | None = None) -> float:
    """SGD (with optional heavy-ball momentum) on the energy, no thresholding.

    ``penalty`` is ``"norm"`` (per-layer ``lambda * ||w||_p``), ``"winograd_l1"``
    (``lambda * ||G(w)||_1`` on spatial kernels) or ``"none"``.  Entries
    flagged in ``mask`` get no update.  ``velocity`` holds the momentum
    buffers and is required when ``cfg.momentum > 0``.
    """
    x, y = batch
    loss, grads = model.loss_and_grads(x, y)
    if not math.isfinite(loss):
        raise TrainingError("loss is not finite", step)
    for key, w in model.params().items():
        update = grads[key]
        layer = key.partition(".")[0]
        if penalty != "none" and _regularized(key, cfg):
            lam = cfg.lam(layer)
            if penalty == "winograd_l1":
                tset = model.layer(layer).tset
                update = update + lam * winograd_l1(w, tset)[1]
            else:
                update = update + lam * norm_grad(w, cfg.norm(layer))
        if mask is not None and key in mask:
            update = np.where(mask[key], 0.0, update)
        if cfg.momentum:
            v = velocity.get(key)
            update = update if v is None else cfg.momentum * v + update
            velocity[key] = update
        w_new = w - _lr_for(model, key, cfg, step) * update
        _check_finite(key, w_new, step)
        w[...] = w_new
    return loss


def train(model, data, cfg: PruneConfig, steps: int, *, penalty: str = "norm",
          rng=None, start_step: int = 0):
    """Run ``steps`` SGD steps over shuffled minibatches; returns the losses."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    batches = data.batches(cfg.batch_size, rng)
    velocity = {}
    return [sgd_step(model, next(batches), cfg, start_step + k, penalty=penalty,
                     velocity=velocity)
            for k in range(steps)]


def pretrain_spatial(net: Network, data, cfg: PruneConfig, steps: int, rng=None):
    """Smoother: spatial SGD with ``lambda * ||G(w)||_1`` on each conv layer."""
    for l in net.conv_layers():
        if not isinstance(l, SpatialConv):
            raise CapabilityError("pretrain_spatial needs a spatial network")
    return train(net, data, cfg, steps, penalty="winograd_l1", rng=rng)


def prune(model, data, cfg: PruneConfig, steps: int, rng=None, start_step: int = 0):
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    batches = data.batches(cfg.batch_size, rng)
    return [prune_step(model, next(batches), cfg, start_step + k) for k in range(steps)]


def lift_network(net: Network) -> Network:
    """Replace every spatial convolution by a Winograd layer with lifted weights."""
    layers = []
    for l in net.layers:
        if isinstance(l, SpatialConv):
            w_f = lift(l.params["w"], l.tset)
            layers.append(WinogradConv(l.name, np.ascontiguousarray(w_f), l.tset))
        elif isinstance(l, Dense):
            layers.append(Dense(l.name, l.params["w"].copy(), l.params["b"].copy()))
        elif isinstance(l, (ReLU, GlobalAvgPool)):
            layers.append(type(l)(l.name))
        else:
            raise CapabilityError(f"cannot lift layer {l.name} ({type(l).__name__})")
    return Network(layers, net.arch)


def zero_mask(model, layers=None) -> dict:
    """Boolean masks (True = frozen zero) for the ``w`` of the given layers."""
    params = model.params()
    if layers is None:
        layers = [l.name for l in model.conv_layers()]
    return {f"{name}.w": params[f"{name}.w"] == 0 for name in layers}


def check_mask(model, mask: dict) -> None:
    params = model.params()
    for key, m in mask.items():
        if m.shape != params[key].shape:
            raise InvariantError(f"mask for {key} has shape {m.shape}")
        if np.any(params[key][m] != 0):
            raise InvariantError(f"masked entries of {key} are no longer zero")


def finetune(model, mask: dict, data, cfg: PruneConfig, steps: int, rng=None,
             check_every: int = 1, on_checkpoint=None, checkpoint_every: int = 0):
    """SGD with L2 penalty; masked coordinates never move.

    The mask invariant is verified every ``check_every`` steps (0 disables)
    and ``on_checkpoint(step, model)`` is called every ``checkpoint_every``
    steps and after the last one.
    """
    check_mask(model, mask)
    l2 = PruneConfig(**{**cfg.__dict__, "norms": {k: 2 for k in cfg.lambdas}})
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    batches = data.batches(cfg.batch_size, rng)
    losses = []
    velocity = {}
    for k in range(steps):
        losses.append(sgd_step(model, next(batches), l2, k, penalty="norm", mask=mask,
                               velocity=velocity))
        if check_every and (k + 1) % check_every == 0:
            check_mask(model, mask)
        if on_checkpoint and checkpoint_every and (k + 1) % checkpoint_every == 0:
            on_checkpoint(k + 1, model)
    check_mask(model, mask)
    if on_checkpoint and not (checkpoint_every and steps % checkpoint_every == 0):
        on_checkpoint(steps, model)
    return losses


def method_b_project(w_f_hat: np.ndarray, tset: TransformSet) -> np.ndarray:
    """Least-squares spatial kernels whose lift is closest to ``w_f_hat``.

    Per kernel: ``(G1^T G1)^-1 G1^T W_F G2 (G2^T G2)^-1``.
    """
    for g in (tset.g1, tset.g2):
        if np.linalg.matrix_rank(g) < g.shape[1]:
            raise NumericError("transform G is rank deficient")
    left = np.linalg.solve(tset.g1.T @ tset.g1, tset.g1.T)     # r x p
    right = np.linalg.solve(tset.g2.T @ tset.g2, tset.g2.T)    # s x q
    return np.einsum("ri,...ij,sj->...rs", left, w_f_hat, right)


def keep_top_fraction(w: np.ndarray, fraction: float) -> np.ndarray:
    """Zero all but the ``round(fraction * size)`` largest-magnitude entries."""
    keep = int(round(fraction * w.size))
    out = np.zeros_like(w)
    if keep <= 0:
        return out
    flat_idx = np.argsort(-np.abs(w), axis=None, kind="stable")[:keep]
    out.reshape(-1)[flat_idx] = w.reshape(-1)[flat_idx]
    return out


def method_b_prune(net: Network, data, cfg: PruneConfig, steps: int,
                   target_density: float, project_every: int = 1, rng=None):
    """Spatial training with repeated lift -> threshold -> least-squares projection.

    ``target_density`` is the fraction of Winograd coefficients kept per
    layer at every thresholding, either one number or a dict keyed by layer.
    """
    density = _per_layer(net, target_density)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    batches = data.batches(cfg.batch_size, rng)
    losses = []
    velocity = {}
    for k in range(steps):
        losses.append(sgd_step(net, next(batches), cfg, k, penalty="winograd_l1",
                               velocity=velocity))
        if (k + 1) % project_every == 0:
            for l in net.conv_layers():
                w_f = keep_top_fraction(lift(l.params["w"], l.tset), density[l.name])
                l.params["w"][...] = method_b_project(w_f, l.tset)
    return losses


def _per_layer(net, density) -> dict:
    names = [l.name for l in net.conv_layers()]
    if isinstance(density, dict):
        missing = set(names) - set(density)
        if missing:
            raise KeyError(f"no target density for {sorted(missing)}")
        return {n: float(density[n]) for n in names}
    return {n: float(density) for n in names}


def deploy_sparse(net: Network, density) -> Network:
    """Winograd network from a spatial one, keeping ``density`` of each layer."""
    lifted = lift_network(net)
    density = _per_layer(lifted, density)
    for l in lifted.conv_layers():
        l.params["w"][...] = keep_top_fraction(l.params["w"], density[l.name])
    return lifted


def sparsity_report(model) -> dict:
    """Per-layer density of the convolution weights and global counts."""
    rows = []
    nnz_total = 0
    size_total = 0
    for l in model.conv_layers():
        w = l.params["w"]
        nnz = int(np.count_nonzero(w))
        rows.append({"layer": l.name, "domain": l.domain, "nnz": nnz, "total": w.size,
                     "density": nnz / w.size})
        nnz_total += nnz
        size_total += w.size
    return {"layers": rows, "nnz": nnz_total, "total": size_total,
            "density": nnz_total / size_total if size_total else 0.0}
