"""Regenerate the golden files under tests/golden from the pinned configs.

Run from the repository root:  python scripts/make_golden.py
Only needed when a deliberate change moves the pilot numbers.
"""
from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from repforget.config import load_configs
from repforget.experiment import run
from repforget.report import blockwise_csv, compare

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "golden"


def key_metrics(ledgers: dict) -> dict:
    """The scalar quantities the trend checks regress against."""
    T = ledgers["ft-ce"].n_tasks
    out = {}
    for name, led in ledgers.items():
        out[name] = {
            "task1_lp_after_task1": led.L(1, 1),
            "task1_lp_T": led.L(T, 1),
            "task1_observed_T": led.A(T, 1),
            "last_task_observed_T": led.A(T, T),
            "avg_observed_T": None if led.A(T, 1) is None else sum(led.A(T, j) for j in range(1, T + 1)) / T,
            "avg_nme_T": sum(led.nme[(T, j)] for j in range(1, T + 1)) / T,
        }
    return out


def main() -> int:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        ledgers = {}
        for cfg in load_configs(ROOT / "configs" / "synthsplit10.yaml"):
            outcome = run(cfg, Path(tmp) / cfg.label())
            if outcome.error:
                print(f"{cfg.label()} failed: {outcome.error}", file=sys.stderr)
                return 1
            ledgers[cfg.label()] = outcome.ledger
        table, _ = compare(list(ledgers.values()), Path(tmp) / "compare")
        (GOLDEN / "synthsplit10_compare.csv").write_text(table.read_text())
        with open(GOLDEN / "synthsplit10_metrics.json", "w") as fh:
            json.dump(key_metrics(ledgers), fh, indent=1, sort_keys=True)
            fh.write("\n")
        (cfg,) = load_configs(ROOT / "configs" / "blockwise_smallconv.yaml")
        outcome = run(cfg, Path(tmp) / "blockwise")
        (GOLDEN / "blockwise_smallconv.csv").write_text(blockwise_csv(outcome.ledger))
    print(f"golden files written to {GOLDEN}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
