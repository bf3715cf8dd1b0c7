"""Representation similarity, prototype classification and ledger summaries."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Task
from .models import FINAL, Network, Snapshot, restore

LEDGER_VERSION = 1


def linear_cka(X, Y, center: bool = True) -> float:
    """Linear CKA: ``||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`` on column-centred features."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"CKA needs matrices with the same number of rows, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    if center:
        X = X - X.mean(axis=0)
        Y = Y - Y.mean(axis=0)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("CKA input contains non-finite values")
    if not np.any(X) or not np.any(Y):
        raise ValueError("CKA is undefined for a zero-variance input")
    # CKA is scale invariant; rescaling keeps the Gram norms finite for huge features
    X = X / np.abs(X).max()
    Y = Y / np.abs(Y).max()
    cross = np.linalg.norm(Y.T @ X) ** 2
    return float(cross / (np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)))


# ----------------------------------------------------------------------- NME

def _normalize_rows(F: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    return F / np.where(norms == 0, 1.0, norms)


@dataclass
class ClassMeanStore:
    means: dict[int, np.ndarray]
    counts: dict[int, int]
    exemplar_ids: dict[int, np.ndarray] = field(default_factory=dict)
    degenerate: set[int] = field(default_factory=set)

    def classes(self) -> list[int]:
        return sorted(self.means)


def build_class_means(features, labels, exemplar_ids=None, classes=None) -> ClassMeanStore:
    """Per-class mean of l2-normalized feature rows."""
    F = _normalize_rows(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    ids = np.arange(len(F)) if exemplar_ids is None else np.asarray(exemplar_ids)
    wanted = sorted(set(labels.tolist())) if classes is None else sorted(classes)
    means, counts, ex, degenerate = {}, {}, {}, set()
    for c in wanted:
        rows = labels == c
        if not np.any(rows):
            raise ValueError(f"class {c} has no exemplars")
        m = F[rows].mean(axis=0)
        if np.allclose(m, 0.0, atol=1e-12):
            degenerate.add(int(c))
        means[int(c)] = m
        counts[int(c)] = int(rows.sum())
        ex[int(c)] = ids[rows]
    return ClassMeanStore(means, counts, ex, degenerate)


def nme_classify(query_features, store: ClassMeanStore) -> np.ndarray:
    """Nearest class mean (Euclidean, normalized queries); ties go to the lowest class id."""
    if not store.means:
        raise ValueError("class-mean store is empty")
    classes = store.classes()
    M = np.stack([store.means[c] for c in classes])
    Q = _normalize_rows(np.asarray(query_features, dtype=np.float64))
    dist = ((Q[:, None, :] - M[None, :, :]) ** 2).sum(axis=2)
    return np.asarray(classes)[np.argmin(dist, axis=1)]


@dataclass
class FastRememberResult:
    accuracies: dict[int, float]
    shortfall: dict[int, dict[int, int]]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.accuracies.values())))


def fast_remember(model, tasks, M: int, rng: np.random.Generator, tap=FINAL) -> FastRememberResult:
    """NME accuracy per task from ``M`` random train exemplars per class; the model is read only."""
    if M < 1:
        raise ValueError("M must be >= 1")
    net = restore(model) if isinstance(model, Snapshot) else model
    accs, short = {}, {}
    for task in tasks:
        picks = []
        for c in range(task.n_classes):
            idx = np.flatnonzero(task.y_train == c)
            if len(idx) < M:
                short.setdefault(task.task_id, {})[c] = M - len(idx)
                picks.append(idx)
            else:
                picks.append(np.sort(rng.choice(idx, size=M, replace=False)))
        chosen = np.concatenate(picks)
        store = build_class_means(net.features(task.X_train[chosen], tap), task.y_train[chosen], chosen)
        pred = nme_classify(net.features(task.X_test, tap), store)
        accs[task.task_id] = float(np.mean(pred == task.y_test))
    return FastRememberResult(accs, short)


# -------------------------------------------------------------------- ledger

class LedgerError(ValueError):
    """A ledger file is corrupt, incomplete, or of an unknown version."""


def _cell_key(i: int, j: int) -> str:
    return f"{i},{j}"


@dataclass
class MetricsLedger:
    """Per-checkpoint metrics; checkpoints and tasks are 1-based, cells only for j <= i."""

    n_tasks: int
    method: str = ""
    fingerprint: str = ""
    data_fingerprint: str = ""
    config: dict = field(default_factory=dict)
    observed: dict[tuple[int, int], float | None] = field(default_factory=dict)
    lp: dict[tuple[int, int], float] = field(default_factory=dict)
    nme: dict[tuple[int, int], float] = field(default_factory=dict)
    cka: dict[tuple[int, int], float] = field(default_factory=dict)
    blockwise: list[dict] = field(default_factory=list)
    all_lp: dict[int, float] = field(default_factory=dict)
    complete: bool = False

    def set_cell(self, table: str, i: int, j: int, value) -> None:
        if not (1 <= j <= i <= self.n_tasks):
            raise LedgerError(f"cell ({i},{j}) outside the lower triangle of a {self.n_tasks}-task ledger")
        if value is not None and not np.isfinite(value):
            raise LedgerError(f"{table}[{i},{j}] = {value} is not finite")
        if value is not None and not 0.0 <= value <= 1.0 and table != "cka":
            raise LedgerError(f"{table}[{i},{j}] = {value} outside [0, 1]")
        getattr(self, table)[(i, j)] = value

    def cells(self) -> list[tuple[int, int]]:
        keys = set(self.lp) | set(self.observed) | set(self.nme) | set(self.cka)
        return sorted(keys)

    def A(self, i: int, j: int):
        return self.observed.get((i, j))

    def L(self, i: int, j: int):
        return self.lp.get((i, j))

    # --------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        def table(d):
            return {_cell_key(i, j): v for (i, j), v in sorted(d.items())}

        return {
            "format": "repforget-ledger",
            "version": LEDGER_VERSION,
            "n_tasks": self.n_tasks,
            "method": self.method,
            "fingerprint": self.fingerprint,
            "data_fingerprint": self.data_fingerprint,
            "complete": self.complete,
            "config": self.config,
            "observed": table(self.observed),
            "lp": table(self.lp),
            "nme": table(self.nme),
            "cka": table(self.cka),
            "blockwise": self.blockwise,
            "all_lp": {str(k): v for k, v in sorted(self.all_lp.items())},
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsLedger":
        if d.get("format") != "repforget-ledger":
            raise LedgerError("not a repforget ledger")
        if d.get("version") != LEDGER_VERSION:
            raise LedgerError(f"unsupported ledger version {d.get('version')}")
        try:
            def table(t):
                out = {}
                for key, v in t.items():
                    i, j = (int(s) for s in key.split(","))
                    out[(i, j)] = v
                return out

            led = cls(n_tasks=int(d["n_tasks"]), method=d["method"], fingerprint=d["fingerprint"],
                      data_fingerprint=d["data_fingerprint"], config=d["config"], complete=bool(d["complete"]))
            for name in ("observed", "lp", "nme", "cka"):
                for (i, j), v in table(d[name]).items():
                    led.set_cell(name, i, j, v)
            led.blockwise = list(d["blockwise"])
            led.all_lp = {int(k): v for k, v in d["all_lp"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, LedgerError):
                raise
            raise LedgerError(f"corrupt ledger: {exc}") from None
        return led

    @classmethod
    def from_text(cls, text: str) -> "MetricsLedger":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LedgerError(f"ledger is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise LedgerError("ledger root must be an object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "MetricsLedger":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def summarize(ledger: MetricsLedger) -> dict:
    """Final-step averages, task-1 numbers at T and per-task forgetting deltas."""
    T = ledger.n_tasks
    missing = [j for j in range(1, T + 1) if (T, j) not in ledger.lp or (j, j) not in ledger.lp]
    if missing:
        raise LedgerError(f"ledger incomplete: no probe cells for tasks {missing} at the final step")
    return {
        "n_tasks": T,
        "task1_acc": ledger.A(1, 1),
        "task1_observed_T": ledger.A(T, 1),
        "task1_lp_T": ledger.L(T, 1),
        "avg_observed_T": _mean(ledger.A(T, j) for j in range(1, T + 1)),
        "avg_lp_T": _mean(ledger.L(T, j) for j in range(1, T + 1)),
        "avg_nme_T": _mean(ledger.nme.get((T, j)) for j in range(1, T + 1)),
        "lp_forgetting": {j: ledger.L(j, j) - ledger.L(T, j) for j in range(1, T + 1)},
        "observed_forgetting": {j: (ledger.A(j, j) - ledger.A(T, j)) if ledger.A(T, j) is not None else None
                                for j in range(1, T + 1)},
    }
