"""Checkpoints (a directory of WGT1 files plus a JSON manifest) and run logs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CorruptFormatError
from .network import Network, build_network
from .tensor import load_wgt1, save_wgt1

MANIFEST = "manifest.json"


def save_checkpoint(path, net: Network, mask: dict | None = None,
                    extra: dict | None = None, dtype=np.float64) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers = []
    for l in net.layers:
        entry = {"name": l.name, "type": type(l).__name__, "domain": l.domain,
                 "params": {}}
        for pname, arr in l.params.items():
            fname = f"{l.name}.{pname}.wgt"
            save_wgt1(path / fname, arr.astype(dtype))
            entry["params"][pname] = fname
        key = f"{l.name}.w"
        if mask is not None and key in mask:
            fname = f"{l.name}.w.mask.wgt"
            save_wgt1(path / fname, mask[key].astype(np.float64))
            entry["mask"] = fname
        layers.append(entry)
    manifest = {"arch": net.arch, "domain": net.conv_domain(), "layers": layers,
                "extra": extra or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(network, mask or None, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFormatError(f"{path / MANIFEST}: {exc}") from exc
    net = build_network(manifest["arch"], seed=0, domain=manifest["domain"])
    params = net.params()
    mask = {}
    for entry in manifest["layers"]:
        for pname, fname in entry["params"].items():
            key = f"{entry['name']}.{pname}"
            arr = load_wgt1(path / fname)
            if key not in params or params[key].shape != arr.shape:
                raise CorruptFormatError(f"checkpoint tensor {key} does not fit the network")
            params[key][...] = arr
        if "mask" in entry:
            mask[f"{entry['name']}.w"] = load_wgt1(path / entry["mask"]) != 0
    return net, (mask or None), manifest


class RunManifest:
    """Append-only record of the phases of one experiment directory."""

    def __init__(self, run_dir, config_hash: str):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / MANIFEST
        if self.path.exists():
            data = json.loads(self.path.read_text())
            if data.get("config_hash") != config_hash:
                raise CorruptFormatError(
                    f"{self.path} was produced by a different configuration")
            self.data = data
        else:
            self.data = {"config_hash": config_hash, "phases": []}

    @classmethod
    def open(cls, run_dir) -> "RunManifest":
        """Read an existing run without knowing its configuration."""
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"{path} does not exist")
        return cls(run_dir, json.loads(path.read_text()).get("config_hash"))

    @property
    def phases(self) -> list:
        return self.data["phases"]

    def append(self, entry: dict) -> None:
        ckpt = entry.get("checkpoint")
        if ckpt is not None and not (self.run_dir / ckpt / MANIFEST).exists():
            raise CorruptFormatError(f"checkpoint {ckpt} does not exist")
        self.phases.append(entry)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def latest(self, phase: str | None = None) -> dict:
        for entry in reversed(self.phases):
            if phase is None or entry["phase"] == phase:
                return entry
        raise KeyError(f"no phase {phase!r} recorded in {self.path}")
