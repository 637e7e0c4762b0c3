"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 numeric or tolerance failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import layer as wl
from .bench import BENCH_COLUMNS, bench_layer, gradient_check
from .checkpoint import RunManifest
from .errors import InvariantError, NumericError, WinoError
from .experiment import REPORT_COLUMNS, Experiment, ExperimentConfig, report_rows
from .perf import SPEEDUP_COLUMNS, parse_grid, read_layers, speedup_table
from .tensor import load_wgt1, save_wgt1
from .transforms import cook_toom_transforms, make_transforms

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ToleranceFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[int, int]:
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected m or m,n, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected positive m or m,n, got {text!r}")
    return parts[0], parts[1]


def _shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected positive CxHxW, got {text!r}")
    return dims


def _write_csv(rows, columns, path=None):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    if path:
        Path(path).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _packaged(name):
    return resources.files("winoprune").joinpath("configs", name).read_text()


def _layers_text(path, default):
    return Path(path).read_text() if path else _packaged(default)


def cmd_gen_transforms(args):
    (m, n), (r, s) = args.tile, args.kernel
    if args.source == "cook-toom":
        tset = cook_toom_transforms(m, r, n, s)
    else:
        tset = make_transforms(m, r, n, s)
    buf = io.StringIO()
    writer = csv.writer(buf)
    for idx, (name, mat) in enumerate(tset.matrices().items()):
        if idx:
            buf.write("\n")
        buf.write(f"{name}\n")
        writer.writerows([[repr(float(v)) for v in row] for row in mat])
    sys.stdout.write(buf.getvalue())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, mat in tset.matrices().items():
            save_wgt1(out / f"{name}.wgt", mat)
    return EXIT_OK


def cmd_conv(args):
    (m, n) = args.tile
    img = load_wgt1(args.input)
    w = load_wgt1(args.weights)
    if w.ndim != 4:
        raise ValueError(f"weights must be 4-D, got shape {w.shape}")
    if args.domain == "spatial":
        tset = make_transforms(m, w.shape[2], n, w.shape[3])
        w_f = wl.lift_spatial_weights(w, tset)
    else:
        r, s = w.shape[2] - m + 1, w.shape[3] - n + 1
        if r < 1 or s < 1:
            raise ValueError(f"Winograd weights {w.shape} are too small for tile {m}x{n}")
        tset = make_transforms(m, r, n, s)
        w_f = w
    out, _ = wl.forward(img, w_f, tset)
    save_wgt1(args.out, np.ascontiguousarray(out))
    return EXIT_OK


def cmd_grad_check(args):
    errs = gradient_check(args.seed, args.shape, m=args.tile[0], r=args.kernel,
                          k_out=args.out_channels)
    for name, err in errs.items():
        print(f"{name} max_rel_err={err:.3e}")
    worst = max(errs.values())
    print(f"max_rel_err={worst:.3e}")
    if not worst < args.tol:
        raise ToleranceFailure(f"gradient error {worst:.3e} exceeds {args.tol:g}")
    return EXIT_OK


def _experiment(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default()
    return Experiment(cfg, args.out)


def _print_entry(entry):
    acc = entry["accuracy"]
    line = f"{entry['phase']}: accuracy={acc:.4f} density={entry['density']:.4f}"
    if entry.get("baseline_accuracy") is not None:
        line += f" baseline_accuracy={entry['baseline_accuracy']:.4f}"
    print(line)
    _write_csv([{"layer": r["layer"], "domain": r["domain"], "density_x": r["density"],
                 "sparsity_pct": 100.0 * (1 - r["density"]), "accuracy": acc}
                for r in entry["layers"]], REPORT_COLUMNS)


def cmd_train(args):
    _print_entry(_experiment(args).pretrain())
    return EXIT_OK


def cmd_prune(args):
    exp = _experiment(args)
    if args.method == "b":
        entry = exp.method_b(args.density)
    else:
        entry = exp.prune()
    _print_entry(entry)
    return EXIT_OK


def cmd_finetune(args):
    exp = _experiment(args)
    entry = exp.finetune()
    exp.verify_finetune_checkpoints()
    _print_entry(entry)
    return EXIT_OK


def cmd_report(args):
    rows = report_rows(RunManifest.open(args.run), args.phase)
    _write_csv(rows, REPORT_COLUMNS, args.csv)
    return EXIT_OK


def cmd_infer_bench(args):
    layers = read_layers(_layers_text(args.layers, "bench64.ini"))
    rows = [bench_layer(d, x, args.batch, args.workers, args.precision, args.seed,
                        args.repeats)
            for d in layers for x in parse_grid(args.density_sweep)]
    _write_csv(rows, BENCH_COLUMNS, args.csv)
    return EXIT_OK


def cmd_perf_model(args):
    layers = read_layers(_layers_text(args.layers, "alexnet.ini"))
    rows = speedup_table(layers, parse_grid(args.density_grid), args.alpha,
                         args.machine_balance)
    cols = list(SPEEDUP_COLUMNS)
    if args.machine_balance is not None:
        cols += ["arithmetic_intensity", "bound"]
    _write_csv(rows, cols, args.csv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="winoprune",
                     description="Sparse Winograd convolution: layers, pruning and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-transforms", help="print transform matrices as CSV blocks")
    p.add_argument("--tile", type=_pair, default=(2, 2), help="output tile m or m,n")
    p.add_argument("--kernel", type=_pair, default=(3, 3), help="kernel r or r,s")
    p.add_argument("--source", choices=["canonical", "cook-toom"], default="canonical",
                   help="hand-written F(2x2,3x3) matrices when available, or always generate")
    p.add_argument("--out-dir", help="also write A1.wgt ... G2.wgt here")
    p.set_defaults(func=cmd_gen_transforms)

    p = sub.add_parser("conv", help="convolve a WGT1 image with WGT1 weights")
    p.add_argument("--input", required=True, help="C x H x W or N x C x H x W image")
    p.add_argument("--weights", required=True, help="K x C x r x s or K x C x p x q")
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=_pair, default=(2, 2))
    p.add_argument("--domain", choices=["spatial", "winograd"], default="spatial")
    p.set_defaults(func=cmd_conv)

    p = sub.add_parser("grad-check", help="finite-difference check of layer gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=_shape, default=(1, 6, 6), help="CxHxW input")
    p.add_argument("--tile", type=_pair, default=(2, 2))
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--out-channels", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_grad_check)

    for name, func, helptext in [("train", cmd_train, "pre-train the network"),
                                 ("prune", cmd_prune, "prune in the Winograd domain"),
                                 ("finetune", cmd_finetune, "fine-tune with a fixed mask")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="experiment INI file (default: packaged toy config)")
        p.add_argument("--out", required=True, help="run directory")
        if name == "prune":
            p.add_argument("--method", choices=["a", "b"], default="a",
                           help="a: native Winograd pruning; b: threshold and project")
            p.add_argument("--density", type=float,
                           help="method b target density (default: match the fine-tuned run)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="sparsity table of a run as CSV")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--phase", help="phase to report (default: latest)")
    p.add_argument("--csv", help="output file (default: stdout)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("infer-bench", help="time sparse Winograd inference")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--layers", help="layer INI file (default: one 64-channel layer)")
    p.add_argument("--density-sweep", default="0.02:1.0:log")
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="output file (default: stdout)")
    p.set_defaults(func=cmd_infer_bench)

    p = sub.add_parser("perf-model", help="projected speedups from the FLOP model")
    p.add_argument("--layers", help="layer INI file (default: AlexNet-like conv2-conv5)")
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--density-grid", default="0.02:1:log20")
    p.add_argument("--machine-balance", type=float, help="FLOP/byte of the target machine")
    p.add_argument("--csv", help="output file (default: stdout)")
    p.set_defaults(func=cmd_perf_model)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "batch", 1) < 1 or getattr(args, "workers", 1) < 1:
        print(f"{parser.prog}: error: batch and workers must be positive", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ToleranceFailure, NumericError, InvariantError) as exc:
        print(f"{parser.prog}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WinoError, ValueError, KeyError, OSError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
