"""Synthetic datasets, task splits, contrastive views and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import stream

KINDS = ("gaussian-clusters", "concentric-spirals", "grid-images")


class DataError(ValueError):
    """Malformed dataset input."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian-clusters"
    n_classes: int = 20
    samples_per_class: int = 200
    input_dim: int = 64
    image_side: int = 8
    separation: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.samples_per_class < 5:
            raise ValueError("samples_per_class must be >= 5 for an 80/20 split")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    ids_train: np.ndarray
    ids_test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.X_train.shape[1:])


@dataclass
class Task:
    task_id: int
    classes: tuple[int, ...]
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    head_id: int

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass
class TaskSplit:
    tasks: list[Task]
    shared_head: bool = False

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


@dataclass(frozen=True)
class AugmentationSpec:
    noise_sigma: float = 0.1
    dropout: float = 0.1
    crop_padding: int = 1
    flip_prob: float = 0.5
    brightness: float = 0.2

    def __post_init__(self):
        for name in ("dropout", "flip_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0 or self.brightness < 0 or self.crop_padding < 0:
            raise ValueError("augmentation magnitudes must be non-negative")


# ----------------------------------------------------------------- generation

def _simplex_means(k: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if k <= dim:
        # regular simplex: centred basis vectors, pairwise distance sqrt(2) before scaling
        base = np.eye(k) - 1.0 / k
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        means = np.zeros((k, dim))
        means[:, :k] = base
        means = means @ Q.T
        return means * (separation / np.sqrt(2.0))
    means = rng.standard_normal((k, dim))
    return means / np.linalg.norm(means, axis=1, keepdims=True) * (separation / np.sqrt(2.0))


def _random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    return Q * np.sign(np.diag(R))


def _gaussian_clusters(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    d = spec.input_dim
    means = _simplex_means(spec.n_classes, d, spec.separation, rng)
    X, y = [], []
    for c in range(spec.n_classes):
        scales = np.exp(rng.uniform(np.log(0.3), np.log(1.5), size=d))
        Q = _random_rotation(rng, d)
        z = rng.standard_normal((spec.samples_per_class, d)) * scales
        X.append(means[c] + spec.noise_sigma * z @ Q.T)
        y.append(np.full(spec.samples_per_class, c))
    return np.concatenate(X), np.concatenate(y)


def _spirals(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    d = max(spec.input_dim, 2)
    n = spec.samples_per_class
    X, y = [], []
    embed = _random_rotation(rng, d)[:, :2]
    for c in range(spec.n_classes):
        t = rng.uniform(0.25, 1.0, size=n)
        angle = 2 * np.pi * (1.5 * t + c / spec.n_classes)
        radius = spec.separation * t
        pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        pts = pts + spec.noise_sigma * rng.standard_normal((n, 2))
        X.append(pts @ embed.T)
        y.append(np.full(n, c))
    return np.concatenate(X), np.concatenate(y)


def _grid_images(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_side
    yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
    X, y = [], []
    for c in range(spec.n_classes):
        # each class is a sum of two random oriented gratings
        template = np.zeros((s, s))
        for _ in range(2):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.0, 3.0)
            phase = rng.uniform(0, 2 * np.pi)
            template += np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        template *= spec.separation / np.sqrt(np.mean(template ** 2)) / 2.0
        noise = spec.noise_sigma * rng.standard_normal((spec.samples_per_class, s, s))
        X.append((template + noise)[:, None])
        y.append(np.full(spec.samples_per_class, c))
    return np.concatenate(X), np.concatenate(y)


def train_test_split(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, test_fraction: float = 0.2,
                     ids: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
    """Per-class split; returns (X_train, y_train, X_test, y_test, ids_train, ids_test)."""
    ids = np.arange(len(X)) if ids is None else ids
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(np.sort(idx[:n_test]))
        train_idx.append(np.sort(idx[n_test:]))
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    return X[tr], y[tr], X[te], y[te], ids[tr], ids[te]


def generate(spec: DatasetSpec) -> Dataset:
    rng = stream(spec.seed, "dataset", spec.kind)
    if spec.kind == "gaussian-clusters":
        X, y = _gaussian_clusters(spec, rng)
    elif spec.kind == "concentric-spirals":
        X, y = _spirals(spec, rng)
    else:
        X, y = _grid_images(spec, rng)
    parts = train_test_split(X, y, stream(spec.seed, "dataset", "split"))
    return Dataset(*parts, meta={"kind": spec.kind, "n_classes": spec.n_classes})


# ---------------------------------------------------------------------- tasks

def _subset(ds: Dataset, classes, relabel: bool) -> tuple[np.ndarray, ...]:
    classes = list(classes)
    tr = np.isin(ds.y_train, classes)
    te = np.isin(ds.y_test, classes)
    ytr, yte = ds.y_train[tr], ds.y_test[te]
    if relabel:
        lookup = {c: i for i, c in enumerate(classes)}
        ytr = np.array([lookup[int(v)] for v in ytr], dtype=np.int64)
        yte = np.array([lookup[int(v)] for v in yte], dtype=np.int64)
    return ds.X_train[tr], ytr, ds.X_test[te], yte


def split_tasks(ds: Dataset, n_tasks: int, classes_per_task: int, order_seed: int = 0) -> TaskSplit:
    """Assign classes to tasks by a seeded permutation; task labels are local (0..c-1)."""
    k = ds.n_classes
    if n_tasks < 1 or classes_per_task < 1 or n_tasks * classes_per_task != k:
        raise DataError(f"{n_tasks} tasks x {classes_per_task} classes does not cover {k} classes")
    order = stream(order_seed, "class-order").permutation(k)
    tasks = []
    for t in range(n_tasks):
        classes = tuple(sorted(int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task]))
        tasks.append(Task(t + 1, classes, *_subset(ds, classes, relabel=True), head_id=t + 1))
    return TaskSplit(tasks)


def iid_split_baseline(ds: Dataset, n_subsets: int, seed: int = 0) -> TaskSplit:
    """Partition the training set into class-balanced iid chunks sharing one head and label space."""
    if n_subsets < 1:
        raise DataError("n_subsets must be >= 1")
    counts = np.bincount(ds.y_train)
    if n_subsets > counts.min():
        raise DataError(f"n_subsets={n_subsets} exceeds the smallest class count {counts.min()}")
    rng = stream(seed, "iid-split")
    chunks: list[list[np.ndarray]] = [[] for _ in range(n_subsets)]
    for c in range(len(counts)):
        idx = np.flatnonzero(ds.y_train == c)
        idx = idx[rng.permutation(len(idx))]
        for s, part in enumerate(np.array_split(idx, n_subsets)):
            chunks[s].append(part)
    classes = tuple(range(len(counts)))
    tasks = []
    for s, parts in enumerate(chunks):
        idx = np.sort(np.concatenate(parts))
        tasks.append(Task(s + 1, classes, ds.X_train[idx], ds.y_train[idx], ds.X_test, ds.y_test, head_id=1))
    return TaskSplit(tasks, shared_head=True)


# --------------------------------------------------------------- augmentation

def _augment_vectors(x: np.ndarray, aug: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    out = x + aug.noise_sigma * rng.standard_normal(x.shape) if aug.noise_sigma else x.copy()
    if aug.dropout:
        out = out * (rng.uniform(size=x.shape) >= aug.dropout)
    return out


def _augment_images(x: np.ndarray, aug: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = x.shape
    p = aug.crop_padding
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * p + 1, size=(n, 2))
    flips = rng.uniform(size=n) < aug.flip_prob
    gains = 1.0 + rng.uniform(-aug.brightness, aug.brightness, size=n)
    for i in range(n):
        crop = padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w]
        if flips[i]:
            crop = crop[:, :, ::-1]
        out[i] = crop * gains[i]
    return out


def two_views(x, aug: AugmentationSpec, rng: np.random.Generator, mode: str | None = None):
    """Two independent stochastic views of a batch ``x``.

    ``mode`` is ``"vector"`` or ``"image"``; inferred from rank when omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    inferred = "image" if x.ndim == 4 else "vector"
    mode = mode or inferred
    if mode != inferred:
        raise DataError(f"augmentation mode {mode!r} does not match data of rank {x.ndim}")
    fn = _augment_images if mode == "image" else _augment_vectors
    return fn(x, aug, rng), fn(x, aug, rng)


# ------------------------------------------------------------------------ CSV

def load_table(path, seed: int = 0) -> Dataset:
    """Read ``label,f0,f1,...`` rows; labels are remapped to 0..K-1 (mapping kept in meta)."""
    labels, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "label" or len(header) < 2:
            raise DataError(f"{path}: header must start with 'label' followed by feature columns")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}: line {lineno} is not numeric") from None
            if not np.all(np.isfinite(vals)):
                raise DataError(f"{path}: line {lineno} contains a non-finite value")
            if vals[0] != int(vals[0]):
                raise DataError(f"{path}: line {lineno} label is not an integer")
            labels.append(int(vals[0]))
            rows.append(vals[1:])
    if not rows:
        raise DataError(f"{path}: no data rows")
    raw = np.array(labels)
    uniq = np.unique(raw)
    mapping = {int(u): i for i, u in enumerate(uniq)}
    y = np.array([mapping[int(v)] for v in raw], dtype=np.int64)
    X = np.array(rows, dtype=np.float64)
    if np.bincount(y).min() >= 2:
        parts = train_test_split(X, y, stream(seed, "table-split"))
    else:
        ids = np.arange(len(X))
        parts = (X, y, X[:0], y[:0], ids, ids[:0])
    return Dataset(*parts, meta={"source": str(path), "label_mapping": mapping, "n_rows": len(X)})


def save_table(ds: Dataset, path) -> None:
    """Write train then test rows as ``label,f0,...``; images are flattened."""
    X = np.concatenate([ds.X_train, ds.X_test]).reshape(len(ds.X_train) + len(ds.X_test), -1)
    y = np.concatenate([ds.y_train, ds.y_test])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(X.shape[1])])
        for label, row in zip(y, X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])
