"""Command-line entry point: ``semflow <subcommand> ...``.

Exit status is 0 on success, 1 when a check or metric fails and 2 on usage,
configuration or input errors. Every error is one stderr line starting with
``error:``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .bench import compare_decoders, format_table, write_reports
from .config import SCHEMA, apply_overrides, data_settings, dump_config, load_config_file, model_config, train_config
from .data import gen_synthetic, load_dataset, save_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GradcheckError,
    NonFiniteError,
    SemflowError,
    UndefinedMetricError,
)
from .net import build_model, load_checkpoint
from .pnm import read_pnm
from .tensor import Tensor
from .train import evaluate, train_loop
from .viz import feature_heatmap, flow_to_rgb, gate_to_rgb, write_ppm

DEFAULT_CONFIG = "configs/sfnet_toy.cfg"


class UsageError(SemflowError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _formatter(prog):
    return _Formatter(prog, max_help_position=32)


def _schema_epilog() -> str:
    lines = ["config keys and built-in defaults (the shipped toy configs use these values):"]
    lines += [f"  {key} = {default}" for key, (_, default) in SCHEMA.items()]
    return "\n".join(lines)


def _load_entries(args):
    entries = load_config_file(_existing(args.config, "config")) if args.config else {}
    return apply_overrides(entries, getattr(args, "set", None))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _datasets(args, entries):
    d = data_settings(entries)
    k = model_config(entries).num_classes
    if getattr(args, "data", None):
        train, _ = load_dataset(_existing(args.data, "data directory"))
    else:
        train = gen_synthetic(d["train_seed"], d["train_count"], d["size"], k)
    if getattr(args, "val_data", None):
        val, _ = load_dataset(_existing(args.val_data, "data directory"))
    else:
        val = gen_synthetic(d["val_seed"], d["val_count"], d["size"], k)
    return train, val


def _model_from_checkpoint(args, entries):
    path = _existing(args.checkpoint, "checkpoint")
    model = build_model(model_config(entries))
    load_checkpoint(path, model)
    model.eval()
    return model


# ----------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    samples = gen_synthetic(args.seed, args.count, args.size, args.classes)
    save_dataset(samples, args.out, args.seed, args.classes)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    entries = _load_entries(args)
    mcfg, tcfg = model_config(entries), train_config(entries)
    train, val = _datasets(args, entries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(entries))
    _, history = train_loop(mcfg, tcfg, train, val, out_dir=out)
    scores = [r.val_miou for r in history if r.val_miou is not None]
    if scores:
        print(f"final val mIoU {scores[-1]:.4f}")
    print(f"wrote {out / 'history.csv'} and {out / 'model.sfnc'}")
    return 0


def cmd_eval(args) -> int:
    entries = _load_entries(args)
    model = _model_from_checkpoint(args, entries)
    if args.data:
        samples, _ = load_dataset(_existing(args.data, "data directory"))
    else:
        d = data_settings(entries)
        samples = gen_synthetic(d["val_seed"], d["val_count"], d["size"], model.cfg.num_classes)
    _, (score, per_class) = evaluate(model, samples)
    if np.isnan(score):
        raise UndefinedMetricError("no class is present in predictions or labels")
    print(f"{'class':>5}  {'IoU':>7}")
    for c, v in enumerate(per_class):
        print(f"{c:>5}  {'n/a' if np.isnan(v) else f'{v:.4f}':>7}")
    print(f"mIoU {score:.4f}")
    if args.min_miou is not None and score < args.min_miou:
        print(f"error: mIoU {score:.4f} below required {args.min_miou}", file=sys.stderr)
        return 1
    return 0


def _extents(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--size expects HxW, got {text!r}") from exc
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"--size extents must be positive multiples of 32, got {text!r}")
    return h, w


def cmd_bench(args) -> int:
    entries = _load_entries(args)
    base = model_config(entries)
    config_id = Path(args.config).stem if args.config else "default"
    reports = compare_decoders(base, _extents(args.size), args.warmup, args.runs, threads=args.threads,
                               config_id=config_id)
    txt, csv_path = write_reports(reports, args.out)
    sys.stdout.write(format_table(reports))
    print(f"wrote {txt} and {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.op is not None and args.op not in checks.OPS and args.op not in {n for n, *_ in checks.SUITE}:
        raise ConfigError(f"unknown op {args.op!r}; known: {', '.join(checks.OPS)}")
    failed = 0
    for name, err, limit, ok in checks.run_suite(args.op, args.tol, args.seed):
        print(f"{'PASS' if ok else 'FAIL'} {name:<24} max_rel_err {err:.3e} (limit {limit:.0e})")
        failed += not ok
    if failed:
        print(f"error: {failed} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_viz_flow(args) -> int:
    entries = _load_entries(args)
    model = _model_from_checkpoint(args, entries)
    rgb = read_pnm(_existing(args.image, "image"), b"P6")
    h, w = rgb.shape[:2]
    if h % 32 or w % 32:
        raise DataError(f"image extents {h}x{w} must be multiples of 32")
    image = Tensor(rgb.transpose(2, 0, 1)[None].astype(np.float32) / 255)
    out = model(image)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, img):
        write_ppm(img, out_dir / name)
        written.append(name)

    for pos, flow in out.flows.items():
        emit(f"flow_{pos.lower()}.ppm", flow_to_rgb(flow))
    for pos, feat in out.extras.get("aligned", {}).items():
        emit(f"heatmap_{pos.lower()}.ppm", feature_heatmap(feat))
    if out.gate is not None:
        emit("gate.ppm", gate_to_rgb(out.gate))
    if out.fused is not None:
        emit("heatmap_fused.ppm", feature_heatmap(out.fused))
    if not written:
        print("model has no alignment modules; nothing to draw")
    for name in written:
        print(out_dir / name)
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semflow", description="Flow-aligned segmentation toolkit.", formatter_class=_formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help_text, epilog=None):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=_formatter)

    def config_flags(p, with_set=True):
        p.add_argument("--config", default=DEFAULT_CONFIG, help="flat key = value config file")
        if with_set:
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config key (repeatable, later wins)")

    p = add("gen-data", "write a synthetic dataset as PPM/PGM files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=512, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--size", type=int, default=64, help="image side length (multiple of 32)")
    p.add_argument("--classes", type=int, default=6, help="number of classes including background")
    p.set_defaults(func=cmd_gen_data)

    p = add("train", "train a model; writes history.csv and model.sfnc", _schema_epilog())
    config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", default=None, help="training dataset directory; synthesized from data.* when omitted")
    p.add_argument("--val-data", default=None, help="validation dataset directory; synthesized when omitted")
    p.set_defaults(func=cmd_train)

    p = add("eval", "per-class IoU and mIoU of a checkpoint", _schema_epilog())
    config_flags(p)
    p.add_argument("--checkpoint", required=True, help="model.sfnc file")
    p.add_argument("--data", default=None, help="dataset directory; the synthesized validation split when omitted")
    p.add_argument("--min-miou", type=float, default=None, help="exit 1 when mIoU falls below this value")
    p.set_defaults(func=cmd_eval)

    p = add("bench", "time the three decoders on one shared encoder", _schema_epilog())
    config_flags(p)
    p.add_argument("--size", default="256x512", help="input extents HxW")
    p.add_argument("--warmup", type=int, default=10, help="untimed forwards")
    p.add_argument("--runs", type=int, default=50, help="timed forwards")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 when omitted")
    p.add_argument("--out", default="bench", help="report directory")
    p.set_defaults(func=cmd_bench)

    p = add("gradcheck", "analytic vs numerical gradients for the shipped suite")
    p.add_argument("--op", default=None, help=f"restrict to one op ({', '.join(checks.OPS)})")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error for operator checks")
    p.add_argument("--seed", type=int, default=0, help="input seed")
    p.set_defaults(func=cmd_gradcheck)

    p = add("viz-flow", "colour-code flows, gates and aligned features of one image", _schema_epilog())
    config_flags(p)
    p.add_argument("--checkpoint", required=True, help="model.sfnc file")
    p.add_argument("--image", required=True, help="binary PPM input image")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_viz_flow)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(asctime)s %(message)s")
        return args.func(args)
    except (GradcheckError, NonFiniteError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError, CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
