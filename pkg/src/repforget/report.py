"""Delimited tables and SVG figures rendered from metrics ledgers alone."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .analysis import LedgerError, MetricsLedger, summarize

matplotlib.rcParams.update({"svg.hashsalt": "repforget", "svg.fonttype": "none", "font.size": 11})

CANVAS_PX = (800, 500)
DPI = 72  # SVG user units are points
METRICS_HEADER = ["checkpoint", "task", "observed_acc", "lp_acc", "nme_acc", "cka"]
BLOCKWISE_HEADER = ["task", "block", "lp_after_task", "lp_at_end", "delta"]
COMPARE_HEADER = ["method", "Task 1 Acc.", "Obs. Acc. Task 1 at T", "Task 1 LP T", "LP Acc. All T",
                  "Avg. Obs. Acc.", "Avg. LP Acc.", "Avg. NME Acc."]


def fmt(value) -> str:
    """Six-decimal fixed point; absent values become empty fields."""
    return "" if value is None else f"{float(value):.6f}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def metrics_csv(ledger: MetricsLedger) -> str:
    rows = [[i, j, fmt(ledger.observed.get((i, j))), fmt(ledger.lp.get((i, j))), fmt(ledger.nme.get((i, j))),
             fmt(ledger.cka.get((i, j)))] for i, j in ledger.cells()]
    return _csv_text(METRICS_HEADER, rows)


def blockwise_deltas(ledger: MetricsLedger) -> dict[int, list[tuple[int, float, float]]]:
    """task -> [(block, acc right after the task, acc at the last checkpoint)]."""
    acc = {(r["checkpoint"], r["task"], r["tap"]): r["accuracy"] for r in ledger.blockwise}
    if not acc:
        return {}
    last = max(c for c, _, _ in acc)
    out: dict[int, list] = {}
    for (c, task, tap), a in sorted(acc.items()):
        if c == task and (last, task, tap) in acc and last > task:
            out.setdefault(task, []).append((tap, a, acc[(last, task, tap)]))
    return out


def blockwise_csv(ledger: MetricsLedger) -> str:
    rows = [[task, tap, fmt(a), fmt(b), fmt(a - b)]
            for task, entries in blockwise_deltas(ledger).items() for tap, a, b in entries]
    return _csv_text(BLOCKWISE_HEADER, rows)


def _figure() -> Figure:
    return Figure(figsize=(CANVAS_PX[0] / DPI, CANVAS_PX[1] / DPI), dpi=DPI)


def _save(fig: Figure, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def task_figure(ledger: MetricsLedger, task: int, path: Path, label: str = "") -> None:
    steps = [i for i in range(task, ledger.n_tasks + 1) if (i, task) in ledger.lp]
    fig = _figure()
    ax = fig.add_subplot()
    obs = [(i, ledger.observed.get((i, task))) for i in steps]
    obs = [(i, v) for i, v in obs if v is not None]
    if obs:
        ax.plot(*zip(*obs), marker="o", label="observed accuracy", gid="curve-observed")
    if steps:
        ax.plot(steps, [ledger.lp[(i, task)] for i in steps], marker="s", label="linear probe accuracy", gid="curve-lp")
    ax.set_xlabel("checkpoint (tasks learned)")
    ax.set_ylabel(f"task {task} accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(range(1, ledger.n_tasks + 1))
    ax.set_title(f"{label or ledger.method}: task {task}")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    _save(fig, path)


def blockwise_figure(ledger: MetricsLedger, path: Path, label: str = "") -> None:
    fig = _figure()
    ax = fig.add_subplot()
    for task, entries in blockwise_deltas(ledger).items():
        taps = [e[0] for e in entries]
        ax.plot(taps, [e[1] - e[2] for e in entries], marker="o", label=f"task {task}")
        ax.set_xticks(taps)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("block")
    ax.set_ylabel("probe accuracy after task - at end")
    ax.set_title(f"{label or ledger.method}: block-wise change")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper left")
    _save(fig, path)


def tracked_tasks(ledger: MetricsLedger) -> list[int]:
    tracked = ledger.config.get("analysis", {}).get("track_tasks") if ledger.config else None
    return [int(t) for t in (tracked or [1]) if int(t) <= ledger.n_tasks]


def write_report(ledger: MetricsLedger, out: Path, label: str = "") -> list[Path]:
    """Metrics CSV, one SVG per tracked task and the block-wise CSV/SVG when recorded."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    label = label or ledger.config.get("name") or ledger.method
    written = [out / "metrics.csv"]
    _write(written[0], metrics_csv(ledger))
    for task in tracked_tasks(ledger):
        written.append(out / f"task{task}.svg")
        task_figure(ledger, task, written[-1], label)
    if blockwise_deltas(ledger):
        written.append(out / "blockwise.csv")
        _write(written[-1], blockwise_csv(ledger))
        written.append(out / "blockwise.svg")
        blockwise_figure(ledger, written[-1], label)
    return written


# ------------------------------------------------------------------- compare

def compare_row(ledger: MetricsLedger, label: str) -> list[str]:
    s = summarize(ledger)
    T = ledger.n_tasks
    return [label, fmt(s["task1_acc"]), fmt(s["task1_observed_T"]), fmt(s["task1_lp_T"]),
            fmt(ledger.all_lp.get(T)), fmt(s["avg_observed_T"]), fmt(s["avg_lp_T"]), fmt(s["avg_nme_T"])]


def _label(ledger: MetricsLedger) -> str:
    return (ledger.config or {}).get("name") or ledger.method


def compare(ledgers: list[MetricsLedger], out: Path) -> list[Path]:
    """Side-by-side summary of runs over the same data; differing data fingerprints are an error."""
    if not ledgers:
        raise LedgerError("nothing to compare")
    prints = {led.data_fingerprint for led in ledgers}
    if len(prints) > 1:
        raise LedgerError(f"ledgers were produced on different data (fingerprints {sorted(prints)})")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [compare_row(led, _label(led)) for led in ledgers]
    table = out / "compare.csv"
    _write(table, _csv_text(COMPARE_HEADER, rows))
    fig = _figure()
    ax = fig.add_subplot()
    for k, led in enumerate(ledgers):
        steps = [i for i in range(1, led.n_tasks + 1) if (i, 1) in led.lp]
        line, = ax.plot(steps, [led.lp[(i, 1)] for i in steps], marker="s", label=f"{_label(led)} LP",
                        gid=f"curve-lp-{k}")
        obs = [(i, led.observed.get((i, 1))) for i in steps]
        obs = [(i, v) for i, v in obs if v is not None]
        if obs:
            ax.plot(*zip(*obs), linestyle="--", marker="o", color=line.get_color(), label=f"{_label(led)} observed",
                    gid=f"curve-observed-{k}")
    ax.set_xlabel("checkpoint (tasks learned)")
    ax.set_ylabel("task 1 accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    figure = out / "compare_task1.svg"
    _save(fig, figure)
    return [table, figure]
