"""Command-line entry point: ``lsrseg <command> [options] [--<config-key> value ...]``.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import GraphError, NonFiniteError, ShapeError
from .formats import FormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lsrseg")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value


def parse_overrides(tokens: list[str]) -> dict:
    """Turn ``--key value`` pairs into RunConfig overrides (dashes or underscores)."""
    from .harness import RunConfig

    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, _, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in types:
            raise UsageError(f"unknown option --{key}")
        if not value:
            if i + 1 >= len(tokens):
                raise UsageError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 1
        try:
            out[key] = _coerce(value, types[key])
        except ValueError:
            raise UsageError(f"bad value for --{key}: {value!r}") from None
        i += 1
    return out


def load_config(args, extra: list[str]):
    from .harness import RunConfig

    overrides = parse_overrides(extra)
    if getattr(args, "dataset", None):
        overrides.setdefault("dataset", args.dataset)
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    return cfg.with_overrides(**overrides)


# ---------------------------------------------------------------------------
# IoU CSV helpers


def write_iou_csv(path, per_class, class_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "name", "iou"])
        for c, v in enumerate(per_class):
            w.writerow([c, class_names[c] if c < len(class_names) else "", "" if math.isnan(v) else repr(float(v))])


def read_iou_csv(path) -> list[float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "iou" not in rows[0]:
        raise ValueError(f"{path}: expected columns class,name,iou")
    return [float(r["iou"]) if r["iou"] not in ("", "-") else float("nan") for r in rows]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, extra):
    from .synthdata import DEFAULT_SIZES, build_splits

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    sizes = dict(DEFAULT_SIZES)
    for item in args.size or []:
        split, _, n = item.partition("=")
        if split not in sizes or not n.isdigit():
            raise UsageError(f"bad --size {item!r}; use <split>=<count>")
        sizes[split] = int(n)
    manifests = build_splits(args.out, seed=args.seed, sizes=sizes)
    for name, m in manifests.items():
        print(f"{name}: {m.count} samples")


def cmd_pretrain(args, extra):
    from .harness import pretrain_source

    path = pretrain_source(load_config(args, extra), args.out)
    print(path)


def cmd_oracle(args, extra):
    from .harness import train_target_supervised

    print(train_target_supervised(load_config(args, extra), args.out))


def cmd_adapt(args, extra):
    from .harness import adapt

    print(adapt(load_config(args, extra), args.source, args.out))


def cmd_eval(args, extra):
    from .harness import evaluate
    from .synthdata import CLASS_NAMES

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    res = evaluate(args.checkpoint, args.dataset, args.split)
    for c, v in enumerate(res.per_class):
        print(f"{CLASS_NAMES[c]:>12s}  {100 * v:6.2f}")
    print(f"{'mIoU':>12s}  {100 * res.miou:6.2f}")
    print(f"{'std':>12s}  {100 * res.stddev:6.2f}")
    if args.csv:
        write_iou_csv(args.csv, res.per_class, CLASS_NAMES)


def cmd_masr(args, extra):
    from .metrics import iou_from_values, load_table1, masr

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    if args.adapt and args.sup:
        a, s = read_iou_csv(args.adapt), read_iou_csv(args.sup)
        if len(a) != len(s):
            raise ValueError("IoU files list different numbers of classes")
        classes = [c for c in range(len(a)) if not math.isnan(a[c])]
        names = [str(c) for c in range(len(a))]
        scale = 1.0
    elif args.adapt or args.sup:
        raise UsageError("--adapt and --sup go together")
    else:
        table = load_table1(args.table)
        a = table.per_class(args.setup, args.method)
        ref_setup, _, ref_method = args.reference.partition(":")
        s = table.per_class(ref_setup, ref_method)
        classes = (table.thirteen_class_subset(args.setup, args.method) if args.subset13
                   else table.classes_available(args.setup, args.method))
        names = table.class_names
        a = [np.nan if v is None else v for v in a]
        s = [np.nan if v is None else v for v in s]
        scale = 100.0
    report = masr(a, s, classes)
    for c, r in zip(report.classes, report.asr):
        print(f"{names[c]:>14s}  ASR {100 * r:6.2f}")
    sub = iou_from_values([a[c] for c in classes])
    print(f"mIoU {sub.miou * 100 / scale:.2f}  std {sub.stddev * 100 / scale:.2f}  "
          f"mASR {100 * report.masr:.2f}  classes {len(classes)}")


def cmd_diagnose(args, extra):
    from .harness import diagnose

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    diag = diagnose(args.checkpoint, args.dataset, args.split, args.out, args.per_class, args.seed)
    print(f"mean angle {diag.mean_angle:.2f} deg, norm median {diag.norms.median:.4f}, "
          f"95% width {diag.norms.width:.4f}")
    if diag.resampled:
        print(f"classes sampled with replacement: {diag.resampled}")


def cmd_gradcheck(args, extra):
    from .gradsuite import TOLERANCE, run_suite

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    results = run_suite(args.seeds, args.epsilon)
    worst = 0.0
    for name, err in results.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name:32s} {err:.3e}")
        worst = max(worst, err)
    if worst >= TOLERANCE:
        raise NumericFailure(f"max relative error {worst:.3e} exceeds {TOLERANCE:g}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lsrseg", description="Latent-space regularized domain adaptation on shapes-world.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="build the synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", action="append", metavar="SPLIT=N", help="override a split size")
    s.set_defaults(func=cmd_synth)

    def training(name, func, help_):
        t = sub.add_parser(name, help=help_,
                           epilog="Any RunConfig field may be overridden with --<field> <value>.")
        t.add_argument("--config", help="JSON RunConfig file")
        t.add_argument("--dataset", help="dataset root")
        t.add_argument("--out", required=True, help="checkpoint directory")
        t.set_defaults(func=func)
        return t

    training("pretrain", cmd_pretrain, "source-only training")
    training("oracle", cmd_oracle, "target-supervised training")
    t = training("adapt", cmd_adapt, "adapt a source checkpoint to the target domain")
    t.add_argument("--source", required=True, help="pretrained checkpoint")

    e = sub.add_parser("eval", help="per-class IoU of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="target-test")
    e.add_argument("--csv", help="write per-class IoU here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("masr", help="adapted-to-supervised ratio from IoU CSVs or the bundled table")
    m.add_argument("--adapt", help="IoU CSV of the adapted model")
    m.add_argument("--sup", help="IoU CSV of the target-supervised model")
    m.add_argument("--table", help="results table CSV (default: bundled)")
    m.add_argument("--setup", default="gtav")
    m.add_argument("--method", default="LSR")
    m.add_argument("--reference", default="cityscapes:Target Only", help="SETUP:METHOD of the supervised row")
    m.add_argument("--subset13", action="store_true", help="use the 13-class subset")
    m.set_defaults(func=cmd_masr)

    d = sub.add_parser("diagnose", help="feature norm / angle / projection exports")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--dataset", required=True)
    d.add_argument("--split", default="target-test")
    d.add_argument("--out", required=True)
    d.add_argument("--per-class", type=int, default=350)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    g.add_argument("--seeds", type=int, default=100)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args, extra)
    except UsageError as exc:
        print(f"lsrseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, NonFiniteError, FloatingPointError) as exc:
        print(f"lsrseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, KeyError, ValueError, ShapeError, GraphError,
            json.JSONDecodeError) as exc:
        print(f"lsrseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
