"""Turn a validated experiment config into a run: data, model, training, ledger and files."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import MetricsLedger
from .config import ExperimentConfig
from .continual import AnalysisSpec, MethodConfig, OptimConfig, run_sequence
from .data import AugmentationSpec, Dataset, DatasetSpec, TaskSplit, generate, iid_split_baseline, load_table, split_tasks
from .models import ModelSpec
from .probe import ProbeSpec

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "REPFORGET_OUTPUT_ROOT"
LEDGER_NAME = "ledger.json"


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    """``override`` > ``cfg.output_dir`` > ``runs/<label>``; relative paths sit under the output root."""
    target = Path(override or cfg.output_dir or os.path.join("runs", cfg.label()))
    if target.is_absolute():
        return target
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / target


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    seed = cfg.seed if d.seed is None else d.seed
    if d.path is not None:
        ds = load_table(d.path, seed=seed)
        if cfg.model.family == "smallconv":
            side = math.isqrt(ds.X_train.shape[1])
            if side * side != ds.X_train.shape[1]:
                raise ValueError(f"{d.path}: {ds.X_train.shape[1]} features do not form a square image")
            ds.X_train = ds.X_train.reshape(-1, 1, side, side)
            ds.X_test = ds.X_test.reshape(-1, 1, side, side)
        return ds
    return generate(DatasetSpec(kind=d.kind, n_classes=d.n_classes, samples_per_class=d.samples_per_class,
                                input_dim=d.input_dim, image_side=d.image_side, separation=d.separation,
                                noise_sigma=d.noise_sigma, seed=seed))


def build_split(cfg: ExperimentConfig, ds: Dataset) -> TaskSplit:
    s = cfg.split
    order_seed = cfg.seed if s.order_seed is None else s.order_seed
    if s.mode == "iid":
        return iid_split_baseline(ds, s.n_tasks, order_seed)
    per_task = s.classes_per_task if s.classes_per_task is not None else ds.n_classes // s.n_tasks
    return split_tasks(ds, s.n_tasks, per_task, order_seed)


def model_spec(cfg: ExperimentConfig, ds: Dataset) -> ModelSpec:
    m = cfg.model
    return ModelSpec(m.family, tuple(ds.X_train.shape[1:]), depth=m.depth, width=m.width,
                     representation_dim=m.representation_dim, projection_dim=m.projection_dim)


def method_config(cfg: ExperimentConfig) -> MethodConfig:
    specific = cfg.method.model_dump(exclude={"name"})
    o, t = cfg.optimizer, cfg.training
    return MethodConfig(method=cfg.method.name,
                        optimizer=OptimConfig(kind=o.kind, lr=o.lr, momentum=o.momentum,
                                              weight_decay=o.weight_decay, betas=tuple(o.betas), eps=o.eps),
                        epochs=t.epochs, batch_size=t.batch_size, reduction=t.reduction,
                        augment=AugmentationSpec(**cfg.augment.model_dump()), **specific)


def probe_spec(cfg: ExperimentConfig) -> ProbeSpec:
    p = cfg.probe
    return ProbeSpec(max_iterations=p.max_iterations, tolerance=p.tolerance, l2=p.l2, augment=p.augment,
                     seed=cfg.seed)


def analysis_spec(cfg: ExperimentConfig) -> AnalysisSpec:
    a = cfg.analysis
    return AnalysisSpec(cka=a.cka, blockwise=a.blockwise, all_lp=a.all_lp, nme_m=a.nme_m,
                        track_tasks=tuple(a.track_tasks))


def plan(cfg: ExperimentConfig) -> dict:
    """What a run would do, without generating data or training."""
    a = cfg.analysis
    return {
        "label": cfg.label(),
        "fingerprint": cfg.fingerprint(),
        "method": cfg.method.name,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "dataset": cfg.dataset.path or cfg.dataset.kind,
        "tasks": cfg.split.n_tasks,
        "model": f"{cfg.model.family} depth={cfg.model.depth} width={cfg.model.width}",
        "analyses": [name for name, on in (("cka", a.cka), ("blockwise", a.blockwise), ("all-lp", a.all_lp),
                                           ("nme", a.nme_m is not None)) if on],
    }


@dataclass
class RunOutcome:
    ledger: MetricsLedger
    directory: Path
    error: Exception | None = None


def run(cfg: ExperimentConfig, out: Path) -> RunOutcome:
    """Execute one config, writing the ledger (also when training fails part-way) and snapshots."""
    from .report import write_report

    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    split = build_split(cfg, ds)
    ledger = MetricsLedger(n_tasks=len(split), method=cfg.method.name, fingerprint=cfg.fingerprint(),
                           data_fingerprint=cfg.data_fingerprint(), config=cfg.canonical())
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"fingerprint": cfg.fingerprint(), "config": cfg.canonical()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    try:
        res = run_sequence(split, model_spec(cfg, ds), method_config(cfg), regime=cfg.mode, probe_spec=probe_spec(cfg),
                           seed=cfg.seed, analyses=analysis_spec(cfg), dataset=ds, ledger=ledger)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        ledger.complete = False
        ledger.save(out / LEDGER_NAME)
        log.error("run %s failed: %s", cfg.label(), exc)
        return RunOutcome(ledger, out, exc)
    ledger.save(out / LEDGER_NAME)
    if cfg.save_snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for snap in res.snapshots:
            snap.save(snap_dir / f"checkpoint{snap.step:02d}.snap")
    write_report(ledger, out, label=cfg.label())
    return RunOutcome(ledger, out)
