"""Task-sequence training under finetuning, EWC, LwF, ER and contrastive objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .analysis import MetricsLedger, fast_remember, linear_cka
from .data import AugmentationSpec, Dataset, Task, TaskSplit, two_views
from .diffcore import backward, make_optimizer, no_grad, stream
from .diffcore import ops
from .models import ModelSpec, Network, Snapshot, build, snapshot
from .probe import ProbeSpec, all_lp, observed_accuracy, probe_accuracy

log = logging.getLogger(__name__)

METHODS = ("ft-ce", "ft-supcon", "ft-simclr", "ewc", "lwf", "er")
CONTRASTIVE = ("ft-supcon", "ft-simclr")
REGIMES = ("offline", "online")

# method -> {field: default}
_METHOD_FIELDS = {
    "ewc": {"ewc_lambda": 1000.0, "fisher_samples": None},
    "lwf": {"lwf_alpha": 1.0, "lwf_temperature": 2.0},
    "er": {"memory_per_class": 5, "replay_ratio": 0.5},
    "ft-supcon": {"temperature": 0.1},
    "ft-simclr": {"temperature": 0.5},
}
_ALL_SPECIFIC = sorted({f for fields in _METHOD_FIELDS.values() for f in fields})


class ContinualError(ValueError):
    """Invalid task sequence or method configuration."""


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class MethodConfig:
    method: str = "ft-ce"
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 5
    batch_size: int = 32
    reduction: str = "mean"
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    ewc_lambda: float | None = None
    fisher_samples: int | None = None
    lwf_alpha: float | None = None
    lwf_temperature: float | None = None
    memory_per_class: int | None = None
    replay_ratio: float | None = None
    temperature: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContinualError(f"method must be one of {METHODS}, got {self.method!r}")
        own = _METHOD_FIELDS.get(self.method, {})
        for name in _ALL_SPECIFIC:
            if name not in own and getattr(self, name) is not None:
                raise ContinualError(f"field {name!r} does not apply to method {self.method!r}")
        for name, default in own.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.epochs < 1 or self.batch_size < 1:
            raise ContinualError("epochs and batch_size must be >= 1")
        if self.method == "ewc" and self.ewc_lambda < 0:
            raise ContinualError("ewc_lambda must be >= 0")
        if self.method == "lwf" and (self.lwf_alpha < 0 or self.lwf_temperature <= 0):
            raise ContinualError("lwf_alpha must be >= 0 and lwf_temperature > 0")
        if self.method == "er" and (self.memory_per_class < 0 or not 0 <= self.replay_ratio < 1):
            raise ContinualError("memory_per_class must be >= 0 and replay_ratio in [0, 1)")
        if self.method in CONTRASTIVE and self.temperature <= 0:
            raise ContinualError("temperature must be positive")

    def for_regime(self, regime: str) -> "MethodConfig":
        """Online runs make one pass per task with momentum disabled."""
        if regime not in REGIMES:
            raise ContinualError(f"regime must be one of {REGIMES}, got {regime!r}")
        if regime == "offline":
            return self
        return replace(self, epochs=1, optimizer=replace(self.optimizer, momentum=0.0))


# --------------------------------------------------------------------- replay

class ReplayBuffer:
    """Per-class reservoirs holding at most ``M`` (sample, label, head) triples each."""

    def __init__(self, M: int, rng: np.random.Generator):
        if M < 0:
            raise ValueError("M must be >= 0")
        self.M = M
        self.rng = rng
        self.reservoirs: dict[tuple[int, int], list[tuple[np.ndarray, int, int]]] = {}
        self.seen: dict[tuple[int, int], int] = {}

    def __len__(self) -> int:
        return sum(len(r) for r in self.reservoirs.values())

    def update(self, samples, labels, head_id: int = 0) -> None:
        if self.M == 0:
            return
        for x, y in zip(samples, labels):
            key = (int(head_id), int(y))
            res = self.reservoirs.setdefault(key, [])
            k = self.seen.get(key, 0) + 1
            self.seen[key] = k
            item = (np.array(x, copy=True), int(y), int(head_id))
            if len(res) < self.M:
                res.append(item)
            else:
                slot = int(self.rng.integers(0, k))
                if slot < self.M:
                    res[slot] = item

    def items(self) -> list[tuple[np.ndarray, int, int]]:
        return [it for key in sorted(self.reservoirs) for it in self.reservoirs[key]]

    def sample(self, n: int, rng: np.random.Generator):
        pool = self.items()
        if not pool or n <= 0:
            return None
        pick = np.sort(rng.choice(len(pool), size=min(n, len(pool)), replace=False))
        X = np.stack([pool[i][0] for i in pick])
        y = np.array([pool[i][1] for i in pick], dtype=np.int64)
        heads = np.array([pool[i][2] for i in pick], dtype=np.int64)
        return X, y, heads


def update_buffer(buffer: ReplayBuffer, samples, labels, head_id: int = 0) -> ReplayBuffer:
    buffer.update(samples, labels, head_id)
    return buffer


# -------------------------------------------------------------------- trainer

@dataclass
class TrainerState:
    network: Network
    completed: list[Task] = field(default_factory=list)
    anchors: list[losses.FisherAnchor] = field(default_factory=list)
    buffer: ReplayBuffer | None = None
    teacher: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Trainer:
    def __init__(self, network: Network, cfg: MethodConfig, regime: str = "offline", seed: int = 0):
        self.cfg = cfg.for_regime(regime)
        self.regime = regime
        self.seed = seed
        buffer = None
        if self.cfg.method == "er":
            buffer = ReplayBuffer(self.cfg.memory_per_class, stream(seed, "buffer"))
        self.state = TrainerState(network=network, buffer=buffer)
        self._replay_rng = stream(seed, "replay")

    @property
    def network(self) -> Network:
        return self.state.network

    def _check_task(self, task: Task, shared_head: bool) -> None:
        if len(task.y_train) == 0:
            raise ContinualError(f"task {task.task_id} has no training data")
        if shared_head:
            return
        seen = {c for t in self.state.completed for c in t.classes}
        overlap = seen.intersection(task.classes)
        if overlap:
            raise ContinualError(f"task {task.task_id} reuses classes {sorted(overlap)} from earlier tasks")

    def _trainable(self, task: Task) -> list:
        net = self.network
        params = net.backbone_parameters()
        if self.cfg.method in CONTRASTIVE:
            return params + net.projection_parameters()
        return params + net.head_parameters(task.head_id)

    def _record_teacher(self, task: Task) -> None:
        net = self.network
        self.state.teacher = {}
        with no_grad():
            rep = net.representation(task.X_train)
            for h in sorted(net.heads):
                if h != task.head_id:
                    self.state.teacher[h] = net.head_logits(h, rep=rep).data.copy()

    def _loss(self, task: Task, idx: np.ndarray, aug_rng: np.random.Generator):
        cfg, net = self.cfg, self.network
        Xb, yb = task.X_train[idx], task.y_train[idx]
        if cfg.method in CONTRASTIVE:
            va, vb = two_views(Xb, cfg.augment, aug_rng)
            z = net.project(net.representation(np.concatenate([va, vb])))
            if cfg.method == "ft-supcon":
                return losses.supcon_loss(z, np.concatenate([yb, yb]), cfg.temperature, cfg.reduction)
            return losses.simclr_loss(z, cfg.temperature, cfg.reduction)

        replay = None
        if cfg.method == "er" and self.state.buffer is not None and len(self.state.buffer):
            n_replay = int(round(len(idx) * cfg.replay_ratio / (1.0 - cfg.replay_ratio)))
            replay = self.state.buffer.sample(n_replay, self._replay_rng)
        if replay is None:
            rep = net.representation(Xb)
            loss = losses.cross_entropy(net.head_logits(task.head_id, rep=rep), yb)
        else:
            Xr, yr, hr = replay
            rep = net.representation(np.concatenate([Xb, Xr]))
            heads = np.concatenate([np.full(len(yb), task.head_id), hr])
            labels = np.concatenate([yb, yr])
            total = len(labels)
            loss = None
            for h in sorted(set(heads.tolist())):
                rows = np.flatnonzero(heads == h)
                part = losses.cross_entropy(net.head_logits(h, rep=ops.take(rep, rows)), labels[rows])
                part = part * (len(rows) / total)
                loss = part if loss is None else loss + part

        if cfg.method == "ewc" and self.state.anchors:
            loss = loss + losses.ewc_penalty(net.params, self.state.anchors, cfg.ewc_lambda)
        if cfg.method == "lwf" and self.state.teacher:
            for h, recorded in sorted(self.state.teacher.items()):
                student = net.head_logits(h, rep=rep)
                loss = loss + losses.distillation_loss(student, recorded[idx], cfg.lwf_temperature) * cfg.lwf_alpha
        return loss

    def train_task(self, task: Task, shared_head: bool = False) -> TrainerState:
        cfg, net, st = self.cfg, self.network, self.state
        self._check_task(task, shared_head)
        if cfg.method not in CONTRASTIVE and task.head_id not in net.heads:
            net.add_head(task.head_id, task.n_classes, stream(self.seed, "head", task.head_id))
        if cfg.method == "lwf":
            self._record_teacher(task)
        oc = cfg.optimizer
        opt = make_optimizer(oc.kind, self._trainable(task), oc.lr, momentum=oc.momentum,
                             weight_decay=oc.weight_decay, betas=oc.betas, eps=oc.eps)
        order_rng = stream(self.seed, "order", task.task_id)
        aug_rng = stream(self.seed, "augment", task.task_id)
        n = len(task.y_train)
        for _ in range(cfg.epochs):
            order = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss = self._loss(task, idx, aug_rng)
                opt.zero_grad()
                backward(loss)
                opt.step()
                st.step += 1
                if st.buffer is not None:
                    st.buffer.update(task.X_train[idx], task.y_train[idx], task.head_id)
        if cfg.method == "ewc":
            params = {f"block{k}.{w}": net.params[f"block{k}.{w}"] for k in range(net.spec.depth) for w in "Wb"}
            params[f"head{task.head_id}.W"] = net.params[f"head{task.head_id}.W"]
            params[f"head{task.head_id}.b"] = net.params[f"head{task.head_id}.b"]
            anchor = losses.estimate_fisher(lambda x: net.head_logits(task.head_id, x), params, task.X_train,
                                            stream(self.seed, "fisher", task.task_id), cfg.fisher_samples,
                                            task_id=task.task_id)
            st.anchors.append(anchor)
        for p in net.params.values():
            p.grad = None
        st.teacher = {}
        st.completed.append(task)
        return st


def train_task(trainer: Trainer, task: Task, shared_head: bool = False) -> TrainerState:
    return trainer.train_task(task, shared_head)


# ------------------------------------------------------------------- sequence

@dataclass(frozen=True)
class AnalysisSpec:
    cka: bool = True
    blockwise: bool = False
    all_lp: bool = False
    nme_m: int | None = None
    track_tasks: tuple[int, ...] = (1,)


@dataclass
class SequenceResult:
    ledger: MetricsLedger
    snapshots: list[Snapshot]


def run_sequence(split: TaskSplit, model_spec: ModelSpec, cfg: MethodConfig, regime: str = "offline",
                 probe_spec: ProbeSpec = ProbeSpec(), seed: int = 0, analyses: AnalysisSpec = AnalysisSpec(),
                 dataset: Dataset | None = None, ledger: MetricsLedger | None = None) -> SequenceResult:
    """Train through ``split`` and fill observed (A) and probe (L) accuracies after every task."""
    if len(split) == 0:
        raise ContinualError("empty task sequence")
    T = len(split)
    ledger = ledger or MetricsLedger(n_tasks=T, method=cfg.method)
    net = build(model_spec, stream(seed, "init"))
    trainer = Trainer(net, cfg, regime, seed)
    snaps: list[Snapshot] = []
    ref_features: dict[int, np.ndarray] = {}
    for i, task in enumerate(split.tasks, start=1):
        trainer.train_task(task, shared_head=split.shared_head)
        snaps.append(snapshot(net, i))
        seen = split.tasks[:i]
        for j, tj in enumerate(seen, start=1):
            obs = observed_accuracy(net, tj) if tj.head_id in net.heads else None
            ledger.set_cell("observed", i, j, obs)
            ledger.set_cell("lp", i, j, probe_accuracy(net, tj, probe_spec).accuracy)
            if analyses.cka:
                feats = net.features(tj.X_test)
                if j == i:
                    ref_features[j] = feats
                ledger.set_cell("cka", i, j, _safe_cka(ref_features[j], feats))
        if analyses.nme_m:
            res = fast_remember(net, seen, analyses.nme_m, stream(seed, "nme", i))
            for j in range(1, i + 1):
                ledger.set_cell("nme", i, j, res.accuracies[seen[j - 1].task_id])
        if analyses.blockwise:
            for j in analyses.track_tasks:
                if j > i:
                    continue
                tj = split.tasks[j - 1]
                for tap in range(net.spec.depth):
                    acc = probe_accuracy(net, tj, probe_spec, tap=tap).accuracy
                    ledger.blockwise.append({"checkpoint": i, "task": j, "tap": tap, "accuracy": acc})
        if analyses.all_lp and dataset is not None:
            ledger.all_lp[i] = all_lp(net, dataset, probe_spec)
        log.info("task %d/%d done: A[%d,1]=%s L[%d,1]=%.4f", i, T, i, ledger.A(i, 1), i, ledger.L(i, 1))
    ledger.complete = True
    return SequenceResult(ledger, snaps)


def _safe_cka(X: np.ndarray, Y: np.ndarray) -> float | None:
    try:
        return linear_cka(X, Y)
    except ValueError:
        return None
