"""Command line entry points: run, compare, selftest.

Exit codes: 0 success, 2 configuration problems (bad file, bad --set,
bad flag values), 1 runtime failures. Human-readable progress goes to
stderr; machine output goes to files only.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, apply_override, build_config, parse_raw
from .runner import compare, run, selftest


def _load_with_overrides(path: str, sets, seed):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = parse_raw(text)
    for assignment in sets or ():
        apply_override(raw, assignment)
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed: must be non-negative")
        raw["seed"] = seed
    return build_config(raw)


def _cmd_run(args) -> int:
    cfg = _load_with_overrides(args.config, args.set, args.seed)
    out = args.out if args.out is not None else (cfg.output_dir or "dsfl_out")
    result = run(cfg, threads=args.threads, out_dir=out)
    logging.getLogger("dsfl").info(
        "done: %d rounds, top accuracy %.4f, wrote %s",
        len(result.metrics), result.top_accuracy, result.csv_path)
    return 0


def _cmd_compare(args) -> int:
    try:
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
    except ValueError as exc:
        raise ConfigError(f"--thresholds: {exc}") from exc
    if any(not 0 < t < 1 for t in thresholds):
        raise ConfigError("--thresholds: values must be in (0, 1)")
    entries = []
    labels = set()
    for path in args.configs:
        label = Path(path).stem
        if label in labels:
            label = f"{label}-{len(entries)}"
        labels.add(label)
        entries.append((label, _load_with_overrides(path, None, None)))
    try:
        rows, table = compare(entries, thresholds=thresholds,
                              threads=args.threads, out_dir=args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(table)
    return 0


def _cmd_selftest(_args) -> int:
    results = selftest()
    ok = True
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        print(f"[{status}] {name}: {detail}", file=sys.stderr)
        ok = ok and passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsfl",
        description="Deterministic federated-distillation simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured experiment")
    p_run.add_argument("config", help="path to a TOML run configuration")
    p_run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config field (repeatable)")
    p_run.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_run.add_argument("--threads", type=int, default=1,
                       help="parallel client workers (results are identical)")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run several configs and tabulate costs")
    p_cmp.add_argument("configs", nargs="+", help="TOML run configurations")
    p_cmp.add_argument("--thresholds", default="0.7,0.8",
                       help="comma-separated accuracy thresholds for ComU@x")
    p_cmp.add_argument("--threads", type=int, default=1)
    p_cmp.add_argument("--out", default=None, help="output directory")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_self = sub.add_parser("selftest", help="run the built-in invariant suites")
    p_self.set_defaults(fn=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
