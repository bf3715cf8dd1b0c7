"""Command-line entry point: run, report, compare, probe and selftest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _cmd_run(args) -> int:
    from .config import ConfigError, load_configs
    from .experiment import output_dir, plan, run

    try:
        configs = load_configs(args.config, seed=args.seed)
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    root = Path(args.out) if args.out else None
    targets = []
    for k, cfg in enumerate(configs):
        base = root or output_dir(cfg)
        targets.append(base / f"{k:02d}-{cfg.label()}" if len(configs) > 1 else base)
    if args.dry_run:
        for cfg, target in zip(configs, targets):
            print(json.dumps({**plan(cfg), "output": str(target)}, sort_keys=True))
        return EXIT_OK
    status = EXIT_OK
    for cfg, target in zip(configs, targets):
        outcome = run(cfg, target)
        if outcome.error is not None:
            print(f"error: run {cfg.label()} failed: {outcome.error} (partial ledger in {target})", file=sys.stderr)
            status = EXIT_FAILURE
        else:
            print(f"{cfg.label()}: wrote {target}")
    return status


def _load_ledger(path):
    from .analysis import MetricsLedger

    return MetricsLedger.load(path)


def _cmd_report(args) -> int:
    from .report import write_report

    ledger = _load_ledger(args.ledger)
    out = Path(args.out) if args.out else Path(args.ledger).parent
    for path in write_report(ledger, out):
        print(path)
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .report import compare

    ledgers = [_load_ledger(p) for p in args.ledgers]
    for path in compare(ledgers, Path(args.out)):
        print(path)
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .data import load_table
    from .models import Snapshot, restore
    from .probe import ProbeSpec, fit_linear_probe

    net = restore(Snapshot.load(args.snapshot))
    ds = load_table(args.dataset, seed=args.seed or 0)
    shape = net.spec.input_shape
    if int(np.prod(shape)) != ds.X_train.shape[1]:
        print(f"error: dataset has {ds.X_train.shape[1]} features, snapshot expects input {shape}", file=sys.stderr)
        return EXIT_USAGE
    tap = "final" if args.tap is None else args.tap
    Xtr = ds.X_train.reshape((-1,) + tuple(shape))
    Xte = ds.X_test.reshape((-1,) + tuple(shape))
    res = fit_linear_probe(net.features(Xtr, tap), ds.y_train, ProbeSpec(tap=tap))
    print("tap,train_acc,test_acc,converged,iterations")
    print(f"{tap},{res.score(net.features(Xtr, tap), ds.y_train):.6f},{res.score(net.features(Xte, tap), ds.y_test):.6f},"
          f"{str(res.converged).lower()},{res.iterations}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    checks = run_all(args.seed or 0)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'} {c.name}: {c.detail}")
    failed = sum(not c.ok for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repforget", description="Observed vs linear-probe forgetting experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="override the seed of every run")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    # --seed is also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed of every run")

    r = sub.add_parser("run", parents=[common], help="train a task sequence from a YAML config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default from config or env)")
    r.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", parents=[common], help="rebuild CSV and figures from a ledger")
    rep.add_argument("ledger")
    rep.add_argument("--out")
    rep.set_defaults(func=_cmd_report)

    c = sub.add_parser("compare", parents=[common], help="summary table and overlay figure for several ledgers")
    c.add_argument("ledgers", nargs="+")
    c.add_argument("--out", default="compare")
    c.set_defaults(func=_cmd_compare)

    pr = sub.add_parser("probe", parents=[common], help="fit a linear probe on a snapshot's features")
    pr.add_argument("snapshot")
    pr.add_argument("dataset", help="CSV with label,f0,f1,... rows")
    pr.add_argument("--tap", type=int, default=None)
    pr.set_defaults(func=_cmd_probe)

    s = sub.add_parser("selftest", parents=[common], help="gradient and invariance checks")
    s.set_defaults(func=_cmd_selftest)
    return p


def main(argv=None) -> int:
    from .analysis import LedgerError
    from .data import DataError
    from .models import SnapshotError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (LedgerError, DataError, SnapshotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
