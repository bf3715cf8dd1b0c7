"""Optimal linear probes on frozen features and the accuracies derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentationSpec, Dataset, Task, two_views
from .diffcore import no_grad, stream
from .models import FINAL, Network, Snapshot, restore


@dataclass(frozen=True)
class ProbeSpec:
    tap: int | str = FINAL
    max_iterations: int = 5000
    tolerance: float = 1e-6
    l2: float = 1e-4
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("probe tolerance must be positive")
        if self.l2 < 0:
            raise ValueError("probe l2 regularization must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class ProbeResult:
    W: np.ndarray
    b: np.ndarray
    classes: np.ndarray
    train_loss: float
    grad_norm: float
    converged: bool
    iterations: int
    accuracy: float | None = None
    objective_trace: list[float] = field(default_factory=list, repr=False)

    def predict(self, features) -> np.ndarray:
        logits = np.asarray(features, dtype=np.float64) @ self.W + self.b
        return self.classes[np.argmax(logits, axis=1)]

    def score(self, features, labels) -> float:
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise ValueError("cannot score an empty evaluation set")
        return float(np.mean(self.predict(features) == labels))


def _objective(F, y_idx, W, b, l2):
    Z = F @ W
    Z += b
    Z -= Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    s = E.sum(axis=1)
    n = len(F)
    loss = (np.log(s).sum() - Z[np.arange(n), y_idx].sum()) / n + 0.5 * l2 * np.vdot(W, W)
    return float(loss), E, s


def _gradient(F, y_idx, W, E, s, l2):
    D = E / s[:, None]
    D[np.arange(len(F)), y_idx] -= 1.0
    D /= len(F)
    gW = F.T @ D
    gW += l2 * W
    return gW, D.sum(axis=0)


def fit_linear_probe(features, labels, spec: ProbeSpec = ProbeSpec(), trace: bool = False) -> ProbeResult:
    """Minimize mean softmax cross-entropy + (l2/2)||W||^2 by full-batch gradient descent.

    The trial step of each iteration is the Barzilai-Borwein estimate from the
    previous move; it is halved until the Armijo condition holds, so the
    objective never increases.
    """
    F = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if F.ndim != 2 or len(F) != len(labels):
        raise ValueError(f"features {F.shape} do not match {len(labels)} labels")
    if not np.all(np.isfinite(F)):
        raise ValueError("probe features contain non-finite values")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("a linear probe needs at least two classes")
    d, k = F.shape[1], len(classes)
    W = np.zeros((d, k))
    b = np.zeros(k)
    loss, E, s = _objective(F, y, W, b, spec.l2)
    gW, gb = _gradient(F, y, W, E, s, spec.l2)
    sq = float(np.vdot(gW, gW) + np.vdot(gb, gb))
    step = 1.0
    history = [loss] if trace else []
    it = 0
    while sq > spec.tolerance ** 2 and it < spec.max_iterations:
        it += 1
        while True:
            W_new = W - step * gW
            b_new = b - step * gb
            new_loss, E, s = _objective(F, y, W_new, b_new, spec.l2)
            if new_loss <= loss - 1e-4 * step * sq:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if new_loss > loss:
            break
        gW_new, gb_new = _gradient(F, y, W_new, E, s, spec.l2)
        dW, db = W_new - W, b_new - b
        yW, yb = gW_new - gW, gb_new - gb
        curv = float(np.vdot(dW, yW) + np.vdot(db, yb))
        W, b, loss, gW, gb = W_new, b_new, new_loss, gW_new, gb_new
        sq = float(np.vdot(gW, gW) + np.vdot(gb, gb))
        step = float(np.vdot(dW, dW) + np.vdot(db, db)) / curv if curv > 0 else step * 2.0
        step = min(max(step, 1e-10), 1e10)
        if trace:
            history.append(loss)
    gnorm = float(np.sqrt(sq))
    return ProbeResult(W=W, b=b, classes=classes, train_loss=loss, grad_norm=gnorm,
                       converged=gnorm <= spec.tolerance, iterations=it, objective_trace=history)


def probe_accuracy(net: Network, task: Task, spec: ProbeSpec = ProbeSpec(), tap=None) -> ProbeResult:
    """Fit on the task's train split at ``tap``; ``accuracy`` is measured on its test split."""
    tap = spec.tap if tap is None else tap
    X, y = task.X_train, task.y_train
    if spec.augment:
        # clean rows plus one augmented view of each
        view, _ = two_views(X, AugmentationSpec(), stream(spec.seed, "probe-augment", task.task_id))
        X, y = np.concatenate([X, view]), np.concatenate([y, y])
    res = fit_linear_probe(net.features(X, tap), y, spec)
    res.accuracy = res.score(net.features(task.X_test, tap), task.y_test)
    return res


def observed_accuracy(net: Network, task: Task) -> float:
    """Test accuracy of the task's own head; ties go to the lowest class index."""
    with no_grad():
        logits = net.head_logits(task.head_id, task.X_test).data
    return float(np.mean(np.argmax(logits, axis=1) == task.y_test))


def _as_network(model) -> Network:
    return restore(model) if isinstance(model, Snapshot) else model


def representation_forgetting(snap_a, snap_b, task: Task, spec: ProbeSpec = ProbeSpec()) -> float:
    """Probe accuracy under ``snap_a`` minus under ``snap_b``; positive means forgetting."""
    acc_a = probe_accuracy(_as_network(snap_a), task, spec).accuracy
    acc_b = probe_accuracy(_as_network(snap_b), task, spec).accuracy
    return acc_a - acc_b


def blockwise_probe(snap, task: Task, taps=None, spec: ProbeSpec = ProbeSpec()) -> dict:
    """One probe per tap, evaluated on the task's test split."""
    net = _as_network(snap)
    taps = list(range(net.spec.depth)) if taps is None else list(taps)
    return {tap: probe_accuracy(net, task, spec, tap=tap) for tap in taps}


def all_lp(snap, ds: Dataset, spec: ProbeSpec = ProbeSpec()) -> float:
    """Single probe over the union label space, trained on all train data, scored on all test data."""
    net = _as_network(snap)
    res = fit_linear_probe(net.features(ds.X_train, spec.tap), ds.y_train, spec)
    return res.score(net.features(ds.X_test, spec.tap), ds.y_test)
