"""Training objectives: cross-entropy, SupCon, SimCLR, distillation and EWC."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffcore import Tensor, backward
from .diffcore import ops
from .diffcore.tensor import ShapeError


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    return ops.softmax_cross_entropy(logits, labels)


def sim(a, b, temperature: float) -> float:
    """``exp(cos(a, b) / temperature)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("sim is undefined for a zero vector")
    return float(np.exp(a @ b / (temperature * na * nb)))


def _cosine_logits(embeddings: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if embeddings.ndim != 2:
        raise ShapeError(f"embeddings must be (rows, dim), got {embeddings.shape}")
    if np.any(np.sum(embeddings.data ** 2, axis=1) == 0):
        raise ValueError("contrastive loss is undefined for a zero embedding")
    z = ops.l2_normalize(embeddings)
    return ops.matmul(z, ops.transpose(z)) / temperature


def _contrastive(logits: Tensor, positives: np.ndarray, temperature: float, reduction: str) -> Tensor:
    # Shifting by the largest attainable logit (1/tau) keeps exp() bounded; the
    # shift cancels between numerator and denominator.
    n = logits.shape[0]
    others = 1.0 - np.eye(n)
    shift = 1.0 / temperature
    denom = ops.sum(ops.exp(logits - shift) * others, axis=1)
    log_denom = ops.log(denom) + shift
    weights = positives / positives.sum(axis=1, keepdims=True)
    pos_term = ops.sum(logits * weights, axis=1)
    total = ops.sum(log_denom - pos_term)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / float(n)
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def supcon_loss(embeddings: Tensor, labels, temperature: float = 0.1, reduction: str = "mean") -> Tensor:
    """Supervised contrastive loss over every row as an anchor.

    Positives of anchor ``i`` are the other rows sharing its label; the
    denominator sums over every row except ``i`` itself. ``reduction="sum"``
    gives the raw double sum, ``"mean"`` divides by the number of rows.
    """
    embeddings = ops.as_tensor(embeddings)
    labels = np.asarray(labels)
    if labels.shape != (embeddings.shape[0],):
        raise ShapeError(f"{embeddings.shape[0]} embeddings but labels shape {labels.shape}")
    positives = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(positives, 0.0)
    if np.any(positives.sum(axis=1) == 0):
        bad = int(np.flatnonzero(positives.sum(axis=1) == 0)[0])
        raise ValueError(f"anchor row {bad} has no positive in the batch")
    return _contrastive(_cosine_logits(embeddings, temperature), positives, temperature, reduction)


def simclr_loss(embeddings: Tensor, temperature: float = 0.5, reduction: str = "mean") -> Tensor:
    """NT-Xent over a batch laid out as ``[view_a; view_b]``.

    Row ``i`` is paired with row ``(i + B) mod 2B``; the denominator spans
    every other row.
    """
    embeddings = ops.as_tensor(embeddings)
    n = embeddings.shape[0]
    if n == 0 or n % 2:
        raise ValueError(f"simclr batch must hold view pairs (even, non-empty row count), got {n}")
    half = n // 2
    positives = np.zeros((n, n))
    idx = np.arange(n)
    positives[idx, (idx + half) % n] = 1.0
    return _contrastive(_cosine_logits(embeddings, temperature), positives, temperature, reduction)


def distillation_loss(student_logits: Tensor, teacher_logits, temperature: float = 2.0) -> Tensor:
    """``T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T))``; teacher is constant."""
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                         dtype=np.float64)
    if teacher.shape != student_logits.shape:
        raise ShapeError(f"student {student_logits.shape} vs teacher {teacher.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t_scaled = teacher / temperature
    t_logp = t_scaled - t_scaled.max(axis=1, keepdims=True)
    t_logp = t_logp - np.log(np.exp(t_logp).sum(axis=1, keepdims=True))
    p_t = np.exp(t_logp)
    s_logp = ops.log_softmax(student_logits / temperature)
    cross = ops.sum(s_logp * p_t, axis=1)
    neg_entropy = np.sum(p_t * t_logp, axis=1)
    kl = ops.mean(neg_entropy - cross)
    return kl * (temperature ** 2)


# ------------------------------------------------------------------------ EWC

@dataclass
class FisherAnchor:
    task_id: int
    anchor: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]

    def __post_init__(self):
        for name, f in self.fisher.items():
            if np.any(f < 0):
                raise ValueError(f"fisher entries must be non-negative ({name})")
            if name in self.anchor and self.anchor[name].shape != f.shape:
                raise ShapeError(f"anchor/fisher shape mismatch for {name}")


def ewc_penalty(params: dict[str, Tensor], anchors: Sequence[FisherAnchor], lam: float) -> Tensor:
    """``(lam / 2) * sum_anchors sum_coords F * (theta - theta*)^2``."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    total = ops.as_tensor(0.0)
    for anc in anchors:
        for name, fisher in anc.fisher.items():
            p = params[name]
            if p.shape != fisher.shape or p.shape != anc.anchor[name].shape:
                raise ShapeError(f"ewc: shape mismatch for {name}: {p.shape} vs {fisher.shape}")
            diff = p - anc.anchor[name]
            total = total + ops.sum(diff * diff * fisher)
    return total * (lam / 2.0)


def estimate_fisher(logits_fn: Callable[[np.ndarray], Tensor], params: dict[str, Tensor], X,
                    rng: np.random.Generator, n_samples: int | None = None, task_id: int = 0) -> FisherAnchor:
    """Diagonal Fisher with labels drawn from the model's own predictive distribution.

    Inputs are visited in order (cycling when ``n_samples`` exceeds the data
    size); each visit draws a fresh label, so the estimate is the true rather
    than the empirical Fisher.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("estimate_fisher: empty data")
    n = len(X) if n_samples is None else int(n_samples)
    if n < 1:
        raise ValueError("n_samples must be >= 1")
    names = list(params)
    plist = [params[k] for k in names]
    acc = {k: np.zeros_like(params[k].data) for k in names}
    for s in range(n):
        x = X[s % len(X)][None]
        logits = logits_fn(x)
        logp = ops.log_softmax(logits)
        probs = np.exp(logp.data[0])
        y = int(rng.choice(len(probs), p=probs / probs.sum()))
        for p in plist:
            p.grad = None
        grads = backward(_pick(logp, y), plist)
        for k, g in zip(names, grads):
            acc[k] += g * g
    for p in plist:
        p.grad = None
    fisher = {k: v / n for k, v in acc.items()}
    anchor = {k: params[k].data.copy() for k in names}
    return FisherAnchor(task_id=task_id, anchor=anchor, fisher=fisher)


def _onehot(y: int, k: int) -> np.ndarray:
    e = np.zeros(k)
    e[y] = 1.0
    return e


def _pick(logp: Tensor, y: int) -> Tensor:
    return ops.sum(logp * _onehot(y, logp.shape[1])[None])
