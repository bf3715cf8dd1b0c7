"""Experiment configuration schema (YAML documents validated with pydantic)."""
from __future__ import annotations

import copy
import hashlib
import json
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Config failed schema validation; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    kind: Literal["gaussian-clusters", "concentric-spirals", "grid-images"] = "gaussian-clusters"
    path: Optional[str] = None
    n_classes: int = Field(20, ge=2)
    samples_per_class: int = Field(200, ge=5)
    input_dim: int = Field(64, ge=1)
    image_side: int = Field(8, ge=2)
    separation: float = Field(4.0, gt=0)
    noise_sigma: float = Field(1.0, ge=0)
    seed: Optional[int] = Field(None, ge=0)


class SplitConfig(_Strict):
    mode: Literal["disjoint", "iid"] = "disjoint"
    n_tasks: int = Field(10, ge=1)
    classes_per_task: Optional[int] = Field(2, ge=1)
    order_seed: Optional[int] = Field(None, ge=0)


class ModelConfig(_Strict):
    family: Literal["mlp", "smallconv"] = "mlp"
    depth: int = Field(2, ge=1)
    width: int = Field(16, ge=1)
    representation_dim: Optional[int] = Field(None, ge=1)
    projection_dim: Optional[int] = Field(None, ge=1)


class OptimizerConfig(_Strict):
    kind: Literal["sgd", "adamw"] = "sgd"
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)


class TrainingConfig(_Strict):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    reduction: Literal["mean", "sum"] = "mean"


class AugmentConfig(_Strict):
    noise_sigma: float = Field(0.1, ge=0)
    dropout: float = Field(0.1, ge=0, le=1)
    crop_padding: int = Field(1, ge=0)
    flip_prob: float = Field(0.5, ge=0, le=1)
    brightness: float = Field(0.2, ge=0)


class FtCe(_Strict):
    name: Literal["ft-ce"]


class FtSupCon(_Strict):
    name: Literal["ft-supcon"]
    temperature: float = Field(0.1, gt=0)


class FtSimCLR(_Strict):
    name: Literal["ft-simclr"]
    temperature: float = Field(0.5, gt=0)


class Ewc(_Strict):
    name: Literal["ewc"]
    ewc_lambda: float = Field(1000.0, ge=0)
    fisher_samples: Optional[int] = Field(None, ge=1)


class Lwf(_Strict):
    name: Literal["lwf"]
    lwf_alpha: float = Field(1.0, ge=0)
    lwf_temperature: float = Field(2.0, gt=0)


class Er(_Strict):
    name: Literal["er"]
    memory_per_class: int = Field(5, ge=0)
    replay_ratio: float = Field(0.5, ge=0, lt=1)


MethodBlock = Annotated[Union[FtCe, FtSupCon, FtSimCLR, Ewc, Lwf, Er], Field(discriminator="name")]


class ProbeConfig(_Strict):
    max_iterations: int = Field(5000, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    l2: float = Field(1e-4, ge=0)
    augment: bool = False


class AnalysisConfig(_Strict):
    cka: bool = True
    blockwise: bool = False
    all_lp: bool = False
    nme_m: Optional[int] = Field(None, ge=1)
    track_tasks: tuple[int, ...] = (1,)


class ExperimentConfig(_Strict):
    name: Optional[str] = None
    seed: int = Field(0, ge=0)
    mode: Literal["offline", "online"] = "offline"
    dataset: DatasetConfig = DatasetConfig()
    split: SplitConfig = SplitConfig()
    model: ModelConfig = ModelConfig()
    method: MethodBlock = FtCe(name="ft-ce")
    optimizer: OptimizerConfig = OptimizerConfig()
    training: TrainingConfig = TrainingConfig()
    augment: AugmentConfig = AugmentConfig()
    probe: ProbeConfig = ProbeConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    output_dir: Optional[str] = None
    save_snapshots: bool = True

    @model_validator(mode="after")
    def _consistency(self):
        contrastive = self.method.name in ("ft-supcon", "ft-simclr")
        if contrastive and self.model.projection_dim is None:
            raise ValueError("model.projection_dim is required for contrastive methods")
        if not contrastive and self.model.projection_dim is not None:
            raise ValueError("model.projection_dim is only allowed with a contrastive method")
        if self.split.mode == "disjoint" and self.dataset.path is None and self.split.classes_per_task is not None:
            if self.split.n_tasks * self.split.classes_per_task != self.dataset.n_classes:
                raise ValueError("split.n_tasks * split.classes_per_task must equal dataset.n_classes")
        if self.model.family == "smallconv" and self.dataset.kind != "grid-images":
            raise ValueError("model.family smallconv needs dataset.kind grid-images")
        if max(self.analysis.track_tasks, default=1) > self.split.n_tasks:
            raise ValueError("analysis.track_tasks refers to a task beyond split.n_tasks")
        return self

    def label(self) -> str:
        return self.name or self.method.name

    def canonical(self) -> dict:
        d = self.model_dump(mode="json")
        d.pop("output_dir", None)
        return d

    def fingerprint(self) -> str:
        return _digest(self.canonical())

    def data_fingerprint(self) -> str:
        return _digest({"dataset": self.dataset.model_dump(mode="json"), "split": self.split.model_dump(mode="json"),
                        "seed": self.seed})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "method":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _format_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    loc = ".".join(str(p) for p in err["loc"] if not str(p).startswith(("function-after", "tagged-union")))
    if err["type"] == "extra_forbidden":
        return ConfigError(f"unknown key '{loc}'", loc)
    msg = err["msg"].removeprefix("Value error, ")
    if not loc:
        # cross-field rules name their key first
        return ConfigError(msg, msg.split(" ", 1)[0])
    return ConfigError(f"invalid value for '{loc}': {msg}", loc)


def validate(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise _format_error(exc) from None


def load_configs(path, seed: int | None = None) -> list[ExperimentConfig]:
    """One config per document, or one per ``grid`` override block when present."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    grid = doc.pop("grid", None)
    if seed is not None:
        doc["seed"] = seed
    if grid is None:
        return [validate(doc)]
    if not isinstance(grid, list) or not grid:
        raise ConfigError("'grid' must be a non-empty list of override blocks", "grid")
    configs = []
    for k, block in enumerate(grid):
        if not isinstance(block, dict):
            raise ConfigError(f"grid[{k}] must be a mapping", f"grid.{k}")
        merged = deep_merge(doc, block)
        if seed is not None:
            merged["seed"] = seed
        try:
            configs.append(validate(merged))
        except ConfigError as exc:
            raise ConfigError(f"grid[{k}]: {exc}", exc.field) from None
    return configs
