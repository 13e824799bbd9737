"""Command-line entry point: gen-data, train, eval, analyze, flops.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import experiment as exp
from .analysis import SchemaError, read_frequencies, read_records, write_records, write_reports
from .checkpoint import CheckpointError
from .config import RunConfig, apply_overrides, parse_config
from .flops import ARCHS, flops_table
from .model import ConfigError, NonFiniteLossError
from .seeding import substream

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_gen_data(args) -> int:
    paths = exp.gen_data(Path(args.out), args.languages, args.concepts, args.train_per_direction,
                         args.dev_per_direction, args.seed, args.min_len, args.max_len)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = parse_config(Path(args.config).read_text())
    overrides = list(args.set or [])
    for key in ("data", "out", "steps", "seed", "alpha", "layout"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return apply_overrides(cfg, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    try:
        result = exp.train(cfg, resume=args.resume)
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}; partial checkpoint kept with failure marker", file=sys.stderr)
        return EXIT_RUNTIME
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"step {last['step']}  task_loss {last['task_loss']:.4f}  aux_loss {last['aux_loss']:.4f}  "
              f"max_f {last['max_f']:.3f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _checkpoint_path(p: str) -> Path:
    path = Path(p)
    return path / exp.CHECKPOINT_NAME if path.is_dir() else path


def cmd_eval(args) -> int:
    ck = _checkpoint_path(args.checkpoint)
    expect = parse_config(Path(args.config).read_text()) if args.config else None
    model, cfg = exp.load_model(ck, expect)
    data_dir = args.data or cfg.data
    ds = exp.load_split(data_dir, args.split)
    if args.uniform_routing:
        model.router = substream(cfg.seed, "routing.uniform")
    res = exp.evaluate(model, ds, args.split, trace=not args.no_trace, capacity_factor=args.eval_capacity)
    for (a, b), acc in res.accuracy.items():
        print(f"{ds.vocab.lang_name(a)}->{ds.vocab.lang_name(b)}\t{acc:.4f}")
    print(f"overall\t{res.overall:.4f}")
    out = Path(args.out) if args.out else ck.parent
    if res.records:
        out.mkdir(parents=True, exist_ok=True)
        write_records(out / "rc_records.csv", res.records)
        print(f"records: {out / 'rc_records.csv'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    records = read_records(Path(args.records))
    freqs = read_frequencies(Path(args.freq))
    paths = write_reports(records, freqs, Path(args.out), args.top_n)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_flops(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise UsageError("--variants is empty")
    rows = flops_table(args.arch, variants)
    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["variant", "flops_per_token", "reference", "deviation_pct"])
        for r in rows:
            w.writerow([r["variant"], f"{r['computed']:.0f}",
                        "" if r["reference"] is None else f"{r['reference']:.0f}",
                        "" if r["deviation_pct"] is None else f"{r['deviation_pct']:.3f}"])
    else:
        print(f"{'variant':<12}{'FLOPs/tok':>12}{'reference':>12}{'dev %':>9}")
        for r in rows:
            ref = "-" if r["reference"] is None else f"{r['reference'] / 1e6:.0f}M"
            dev = "-" if r["deviation_pct"] is None else f"{r['deviation_pct']:+.2f}"
            print(f"{r['variant']:<12}{r['computed'] / 1e6:>11.1f}M{ref:>12}{dev:>9}")
    return EXIT_OK


def _capacity(text: str) -> float | None:
    if text.lower() == "none":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'none', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stratmoe", description="Stratified mixture-of-experts toy experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic multilingual dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--languages", type=int, default=4)
    g.add_argument("--concepts", type=int, default=12, help="words per language")
    g.add_argument("--train-per-direction", type=int, default=200)
    g.add_argument("--dev-per-direction", type=int, default=25)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--layout")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-decode accuracy and RC records")
    e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    e.add_argument("--data", help="dataset directory (default: the run's)")
    e.add_argument("--split", default="dev")
    e.add_argument("--config", help="fail unless the checkpoint was trained with this config")
    e.add_argument("--out", help="directory for rc_records.csv (default: next to the checkpoint)")
    e.add_argument("--no-trace", action="store_true")
    e.add_argument("--eval-capacity", type=_capacity, default=None, metavar="FACTOR|none",
                   help="capacity factor while evaluating (default: none, no token dropping)")
    e.add_argument("--uniform-routing", action="store_true", help="replace gates by a seeded uniform sampler")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="RC reports from rc_records.csv")
    a.add_argument("--records", required=True)
    a.add_argument("--freq", required=True, help="freq.csv written by gen-data")
    a.add_argument("--out", required=True)
    a.add_argument("--top-n", type=int, default=25)
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("flops", help="FLOPs per token next to reference values")
    f.add_argument("--arch", choices=sorted(ARCHS), default="base")
    f.add_argument("--variants", default="dense,vanilla,switch,4-4,2-2-2-2,stacked2")
    f.add_argument("--format", choices=["text", "csv"], default="text")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stratmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (exp.RunError, ConfigError, CheckpointError, SchemaError, ValueError, OSError) as exc:
        print(f"stratmoe: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
