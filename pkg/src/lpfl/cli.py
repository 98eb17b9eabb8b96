"""Command-line entry point: ``lpfl run|compare|validate|synth``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import default_spec_path, load_spec, validate_config
from .data import write_corpus, synth_sentiment


def _load(args) -> object:
    spec = load_spec(args.config or default_spec_path())
    return spec.with_overrides(seed=args.seed, out=args.out, arm=args.arm, parallel_clients=getattr(args, "parallel_clients", None))


def cmd_validate(args) -> int:
    try:
        spec = _load(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"config: {exc}")
        return 2
    bad = validate_config(spec)
    for v in bad:
        print(v)
    if not bad:
        print("ok")
    return 1 if bad else 0


def cmd_run(args) -> int:
    from .harness import ConfigError, run

    try:
        spec = _load(args)
        report = run(spec, resume=args.resume, figures=not args.no_figures)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    keys = ("arm", "clients", "labeled_fraction", "test_acc", "bytes_total", "annotation_error_rate")
    print("\t".join(keys))
    print("\t".join(str(report[k]) for k in keys))
    print(f"artifacts: {spec.out}")
    return 0


def cmd_compare(args) -> int:
    from .harness import compare, format_table, load_report, write_table
    from .plots import plot_comparison

    try:
        rows = compare([load_report(p) for p in args.reports])
    except (ValueError, OSError) as exc:
        print(f"compare: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "comparison.csv", rows)
    plot_comparison(rows, out / "comparison.png")
    print(format_table(rows))
    return 0


def cmd_synth(args) -> int:
    examples = synth_sentiment(args.n, args.vocab_size, args.signal_words, args.noise_rate, args.seed)
    write_corpus(args.output, examples)
    print(f"wrote {len(examples)} examples to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpfl", description="Prompt-based federated learning with LoRA adapters.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("config", nargs="?", help="JSON config (default: the bundled config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--arm", choices=("lp-fl", "fp-fl", "lp-ct", "fp-ct"), help="centralized arms also set clients=1")

    p = sub.add_parser("run", help="run one arm end to end")
    overrides(p)
    p.add_argument("--parallel-clients", type=int, help="max clients trained at once")
    p.add_argument("--resume", action="store_true", help="continue from the latest round checkpoint in --out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a config without running it")
    overrides(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="tabulate reports from several runs")
    p.add_argument("reports", nargs="+", help="report.json files or run directories")
    p.add_argument("--out", default=".", help="where to write comparison.csv and comparison.png")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="write a synthetic sentiment corpus as JSONL")
    p.add_argument("output")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--signal-words", type=int, default=20)
    p.add_argument("--noise-rate", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
