"""Configured, resumable experiment phases: pretrain, prune, finetune, method B.

A run directory holds one checkpoint directory per phase and a
``manifest.json`` that records, in order, what each phase produced.
Nothing time-dependent is written, so identical configs give identical bytes.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import RunManifest, load_checkpoint, save_checkpoint
from .data import IMAGE_SIZE, rng_stream, synth_dataset
from .network import build_network
from .pruning import (PruneConfig, check_mask, finetune, lift_network, method_b_prune,
                      deploy_sparse, pretrain_spatial, prune, sparsity_report, train,
                      zero_mask)

PRUNE_KEYS = {"eps": float, "beta": float, "lr": float, "lr_decay": float,
              "lr_decay_every": int, "winograd_lr_mult": float, "momentum": float,
              "batch_size": int}


def default_config_text() -> str:
    return resources.files("winoprune").joinpath("configs/toy.ini").read_text()


@dataclass
class Phase:
    steps: int
    opt: PruneConfig
    extra: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int
    precision: str
    pretrain_domain: str
    arch: dict
    data: dict
    phases: dict
    init: Path | None = None
    text: str = ""

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.read_string(text)
        exp = parser["experiment"] if parser.has_section("experiment") else {}
        seed = int(exp.get("seed", 0))
        precision = exp.get("precision", "f64")
        if precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {precision!r}")
        domain = exp.get("pretrain_domain", "spatial")
        if domain not in ("spatial", "winograd"):
            raise ValueError(f"pretrain_domain must be spatial or winograd, got {domain!r}")
        init = None
        if exp.get("init"):
            init = Path(base_dir or ".") / exp["init"]
            if not (init / "manifest.json").exists():
                raise FileNotFoundError(f"init checkpoint {init} does not exist")

        net = parser["network"] if parser.has_section("network") else {}
        data = parser["data"] if parser.has_section("data") else {}
        data = {"n_train": int(data.get("n_train", 4000)),
                "n_test": int(data.get("n_test", 2000)),
                "channels": int(data.get("channels", 1)),
                "noise": float(data.get("noise", 0.25))}
        arch = {"in_channels": data["channels"],
                "channels": [int(c) for c in str(net.get("channels", "8,16")).split(",")],
                "kernel": int(net.get("kernel", 3)),
                "tile": int(net.get("tile", 2)),
                "classes": 4}
        phases = {}
        for name in ("pretrain", "prune", "finetune", "method_b"):
            sec = parser[name] if parser.has_section(name) else {}
            phases[name] = _phase(sec, arch, seed)
        cfg = cls(seed, precision, domain, arch, data, phases, init, text)
        cfg.layer_shapes()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), base_dir=path.parent)

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls.from_text(default_config_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def layer_shapes(self) -> list[tuple]:
        """(name, C, K, H_in, H_out) per convolution; rejects shapes that do not chain."""
        if not self.arch["channels"] or min(self.arch["channels"]) < 1:
            raise ValueError("network channels must be positive")
        if self.arch["kernel"] < 1 or self.arch["tile"] < 1:
            raise ValueError("kernel and tile must be positive")
        if self.data["n_train"] < 8 or self.data["n_test"] < 8:
            raise ValueError("need at least 8 training and test samples")
        shapes = []
        c, h = self.arch["in_channels"], IMAGE_SIZE
        for idx, k in enumerate(self.arch["channels"], start=1):
            h_out = h - self.arch["kernel"] + 1
            if h_out < 1:
                raise ValueError(f"conv{idx} has no valid output for a {h}x{h} input")
            shapes.append((f"conv{idx}", c, k, h, h_out))
            c, h = k, h_out
        return shapes


def _phase(sec, arch, seed) -> Phase:
    names = [f"conv{i}" for i in range(1, len(arch["channels"]) + 1)]
    kwargs = {k: conv(sec[k]) for k, conv in PRUNE_KEYS.items() if k in sec}
    lambdas, norms = {}, {}
    for n in names:
        lam = sec.get(f"lambda.{n}", sec.get("lambda"))
        if lam is not None:
            lambdas[n] = float(lam)
        p = sec.get(f"norm.{n}", sec.get("norm"))
        if p is not None:
            norms[n] = int(p)
    if "threshold_layers" in sec:
        kwargs["threshold_layers"] = tuple(v.strip() for v in sec["threshold_layers"].split(",")
                                           if v.strip())
    unknown = {k for k in sec if k.partition(".")[0] not in
               {*PRUNE_KEYS, "lambda", "norm", "steps", "checkpoint_every",
                "threshold_layers"}}
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    extra = {"checkpoint_every": int(sec.get("checkpoint_every", 0))}
    opt = PruneConfig(lambdas=lambdas, norms=norms, seed=seed, **kwargs)
    return Phase(int(sec.get("steps", 0)), opt, extra)


def load_data(cfg: ExperimentConfig):
    d = cfg.data
    train_set = synth_dataset(cfg.seed, d["n_train"], d["channels"], d["noise"], "train")
    test_set = synth_dataset(cfg.seed, d["n_test"], d["channels"], d["noise"], "test")
    return train_set, test_set


def layer_rows(net) -> list[dict]:
    return [{"layer": r["layer"], "domain": r["domain"], "density": r["density"]}
            for r in sparsity_report(net)["layers"]]


def _save(cfg, run_dir, name, net, mask=None, extra=None):
    dtype = np.float32 if cfg.precision == "f32" else np.float64
    save_checkpoint(Path(run_dir) / name, net, mask, extra, dtype=dtype)
    return name


class Experiment:
    """Phases of one run; each one reads its input from the previous checkpoint."""

    def __init__(self, cfg: ExperimentConfig, run_dir):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.manifest = RunManifest(self.run_dir, cfg.config_hash())
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    def _rng(self, phase):
        return rng_stream(self.cfg.seed, "batches", phase)

    def _record(self, phase, net, checkpoint, **extra):
        train_set, test_set = self.data
        entry = {"phase": phase, "checkpoint": checkpoint,
                 "accuracy": net.accuracy(test_set),
                 "density": sparsity_report(net)["density"],
                 "layers": layer_rows(net), **extra}
        self.manifest.append(entry)
        return entry

    def _load(self, phase):
        entry = self.manifest.latest(phase)
        net, mask, _ = load_checkpoint(self.run_dir / entry["checkpoint"])
        return net, mask, entry

    def pretrain(self):
        cfg, ph = self.cfg, self.cfg.phases["pretrain"]
        train_set, _ = self.data
        if cfg.init is not None:
            net, _, _ = load_checkpoint(cfg.init)
        else:
            net = build_network(cfg.arch, cfg.seed, cfg.pretrain_domain)
        if net.conv_domain() == "spatial":
            losses = pretrain_spatial(net, train_set, ph.opt, ph.steps, rng=self._rng("pretrain"))
        else:
            losses = train(net, train_set, ph.opt, ph.steps, rng=self._rng("pretrain"))
        ckpt = _save(cfg, self.run_dir, "pretrain", net)
        return self._record("pretrain", net, ckpt, final_loss=_tail_loss(losses))

    def prune(self):
        cfg, ph = self.cfg, self.cfg.phases["prune"]
        net, _, _ = self._load("pretrain")
        if net.conv_domain() == "spatial":
            net = lift_network(net)
        train_set, test_set = self.data
        baseline = net.accuracy(test_set)
        losses = prune(net, train_set, ph.opt, ph.steps, rng=self._rng("prune"))
        mask = zero_mask(net)
        ckpt = _save(cfg, self.run_dir, "prune", net, mask)
        return self._record("prune", net, ckpt, baseline_accuracy=baseline,
                            final_loss=_tail_loss(losses))

    def finetune(self):
        cfg, ph = self.cfg, self.cfg.phases["finetune"]
        net, mask, prev = self._load("prune")
        if mask is None:
            mask = zero_mask(net)
        train_set, _ = self.data
        checkpoints = []

        def on_checkpoint(step, model):
            checkpoints.append(_save(cfg, self.run_dir, f"finetune_steps/{step:06d}",
                                     model, mask))

        losses = finetune(net, mask, train_set, ph.opt, ph.steps, rng=self._rng("finetune"),
                          on_checkpoint=on_checkpoint,
                          checkpoint_every=ph.extra["checkpoint_every"])
        ckpt = _save(cfg, self.run_dir, "finetune", net, mask)
        return self._record("finetune", net, ckpt, checkpoints=checkpoints,
                            baseline_accuracy=prev.get("baseline_accuracy"),
                            final_loss=_tail_loss(losses))

    def method_b(self, density=None):
        """Project-threshold-reproject training from the pre-trained spatial net.

        Without ``density`` the per-layer densities of the latest fine-tuned
        (method A) network are matched.
        """
        cfg, ph = self.cfg, self.cfg.phases["method_b"]
        net, _, _ = self._load("pretrain")
        if net.conv_domain() != "spatial":
            raise ValueError("method B needs a spatially pre-trained network")
        if density is None:
            density = {r["layer"]: r["density"] for r in self.manifest.latest("finetune")["layers"]}
        train_set, _ = self.data
        losses = method_b_prune(net, train_set, ph.opt, ph.steps, density,
                                rng=self._rng("method_b"))
        deployed = deploy_sparse(net, density)
        ckpt = _save(cfg, self.run_dir, "method_b", deployed, zero_mask(deployed))
        return self._record("method_b", deployed, ckpt, target_density=density,
                            final_loss=_tail_loss(losses))

    def verify_finetune_checkpoints(self) -> int:
        """Reload every fine-tune checkpoint and check the pruning mask; returns the count."""
        entry = self.manifest.latest("finetune")
        _, mask, _ = self._load("prune")
        names = [*entry["checkpoints"], entry["checkpoint"]]
        for name in names:
            net, _, _ = load_checkpoint(self.run_dir / name)
            check_mask(net, mask)
        return len(names)


def _tail_loss(losses, n=100):
    return float(np.mean(losses[-n:])) if losses else None


REPORT_COLUMNS = ["layer", "domain", "density_x", "sparsity_pct", "accuracy"]


def report_rows(manifest: RunManifest, phase: str | None = None) -> list[dict]:
    entry = manifest.latest(phase)
    return [{"layer": r["layer"], "domain": r["domain"], "density_x": r["density"],
             "sparsity_pct": 100.0 * (1.0 - r["density"]), "accuracy": entry["accuracy"]}
            for r in entry["layers"]]
