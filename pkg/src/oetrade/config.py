"""Experiment configuration: a versioned key-value document (YAML or JSON).

Top-level keys (all optional, defaults shown by ``oetrade`` ``ExperimentConfig()``)::

    version: 1
    name: default
    data:      {id_train: {...}, id_test: {...}, outlier_pool: {...}, ood_tests: [{...}, ...]}
    model:     {hidden: [64], feature_dim: 32, embedding_dim: 32}
    loss:      {reg: 5.0, kd: 1.0, sc: 1.0, t_kd: 4.0, tau_sc: 0.1,
                baseline_reg: 0.5, sc_reduction: mean, kd_on_outliers: false}
    sampling:  {q: 0.75, step: 2, m: 500}
    transform: {n: 4, noise_rel: 0.05, jitter_scale: 0.05, apply_to_outliers: true, max_batch: 8192}
    optimizer: {lr: 0.01, pretrain_lr: 0.05, momentum: 0.9, weight_decay: 0.0005,
                schedule: cosine, epochs_pretrain: 50, epochs_finetune: 20,
                batch_in: 128, batch_out: 256, grad_clip: 5.0}
    flags:     {use_kd: true, use_sampling: true, use_oscl: true}
    seeds:     [1, 2, 3, 4, 5, 6, 7, 8]
    score:     msp
    aupr_positive: id
    ladder:    []          # e.g. [ce, oe, oe+kd, oe+sampling, oe+oscl, oe+all]
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .augment import TransformSpec
from .data import DatasetSpec, default_ood_specs
from .errors import ConfigError
from .losses import LossWeights
from .sampling import SamplePlan

CONFIG_VERSION = 1
METHODS = ("ce", "oe", "oe+kd", "oe+sampling", "oe+oscl", "oe+all")


@dataclass(frozen=True)
class DataConfig:
    id_train: DatasetSpec = DatasetSpec("id_train", seed=11)
    id_test: DatasetSpec = DatasetSpec("id_test", n_max=200, seed=12)
    outlier_pool: DatasetSpec = DatasetSpec("outlier_pool", size=5000, seed=13)
    ood_tests: tuple[DatasetSpec, ...] = tuple(default_ood_specs())


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    embedding_dim: int = 32


@dataclass(frozen=True)
class LossConfig:
    reg: float = 5.0
    kd: float = 1.0
    sc: float = 1.0
    t_kd: float = 4.0
    tau_sc: float = 0.1
    baseline_reg: float = 0.5
    sc_reduction: str = "mean"
    kd_on_outliers: bool = False

    def weights(self, reg: float | None = None, kd: float | None = None, sc: float | None = None) -> LossWeights:
        return LossWeights(
            reg=self.reg if reg is None else reg,
            kd=self.kd if kd is None else kd,
            sc=self.sc if sc is None else sc,
            t_kd=self.t_kd,
            tau_sc=self.tau_sc,
        )


@dataclass(frozen=True)
class SamplingConfig:
    q: float = 0.75
    step: int = 2
    m: int = 500

    def plan(self) -> SamplePlan:
        return SamplePlan(self.q, self.step, self.m)


@dataclass(frozen=True)
class TransformConfig:
    n: int = 4
    noise_rel: float = 0.05
    jitter_scale: float = 0.05
    apply_to_outliers: bool = True
    max_batch: int = 8192

    def spec(self, feature_std: float, seed: int) -> TransformSpec:
        return TransformSpec(self.n, self.noise_rel * feature_std, self.jitter_scale, seed, self.max_batch)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    pretrain_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    epochs_pretrain: int = 50
    epochs_finetune: int = 20
    batch_in: int = 128
    batch_out: int = 256
    grad_clip: float = 5.0


@dataclass(frozen=True)
class Flags:
    use_kd: bool = True
    use_sampling: bool = True
    use_oscl: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    sampling: SamplingConfig = SamplingConfig()
    transform: TransformConfig = TransformConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    flags: Flags = Flags()
    seeds: tuple[int, ...] = tuple(range(1, 9))
    score: str = "msp"
    aupr_positive: str = "id"
    ladder: tuple[str, ...] = ()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        o = self.optimizer
        if o.lr <= 0 or o.pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if o.epochs_pretrain < 0 or o.epochs_finetune < 1:
            raise ConfigError("epochs_finetune must be >= 1 and epochs_pretrain >= 0")
        if o.batch_in < 1 or o.batch_out < 1:
            raise ConfigError("batch sizes must be positive")
        if o.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")
        if o.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {o.schedule!r}")
        if self.score not in ("msp", "energy"):
            raise ConfigError(f"unknown score {self.score!r}")
        if self.aupr_positive not in ("id", "ood"):
            raise ConfigError("aupr_positive must be 'id' or 'ood'")
        if self.loss.sc_reduction not in ("sum", "mean"):
            raise ConfigError("sc_reduction must be 'sum' or 'mean'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.ladder if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown ladder methods {bad}; choose from {METHODS}")
        if not self.data.ood_tests:
            raise ConfigError("at least one OOD test set is required")
        d = self.data
        if len({s.observation() for s in (d.id_train, d.id_test, d.outlier_pool, *d.ood_tests)}) != 1:
            raise ConfigError("all dataset specs must share dim, class_radius and lift settings")
        self.loss.weights()
        self.sampling.plan()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["ood_tests"] = [s.to_dict() for s in self.data.ood_tests]
        for key in ("id_train", "id_test", "outlier_pool"):
            d["data"][key] = getattr(self.data, key).to_dict()
        return {"version": CONFIG_VERSION, **_lists(d)}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seeds=(int(seed),))


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def _spec(raw, default: DatasetSpec, where: str) -> DatasetSpec:
    if raw is None:
        return default
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    try:
        spec = DatasetSpec.from_dict(default.to_dict() | raw)
        spec.validate()
        return spec
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc or {})
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    base = DataConfig()
    raw_data = doc.get("data") or {}
    unknown = set(raw_data) - {"id_train", "id_test", "outlier_pool", "ood_tests"}
    if unknown:
        raise ConfigError(f"unknown keys in 'data': {sorted(unknown)}")
    if "ood_tests" in raw_data:
        ood = tuple(_spec(s, DatasetSpec("ood_test"), "data.ood_tests") for s in raw_data["ood_tests"])
    else:
        ood = base.ood_tests
    data = DataConfig(
        id_train=_spec(raw_data.get("id_train"), base.id_train, "data.id_train"),
        id_test=_spec(raw_data.get("id_test"), base.id_test, "data.id_test"),
        outlier_pool=_spec(raw_data.get("outlier_pool"), base.outlier_pool, "data.outlier_pool"),
        ood_tests=ood,
    )
    try:
        return ExperimentConfig(
            name=str(doc.get("name", "default")),
            data=data,
            model=_section(ModelConfig, doc.get("model"), "model"),
            loss=_section(LossConfig, doc.get("loss"), "loss"),
            sampling=_section(SamplingConfig, doc.get("sampling"), "sampling"),
            transform=_section(TransformConfig, doc.get("transform"), "transform"),
            optimizer=_section(OptimizerConfig, doc.get("optimizer"), "optimizer"),
            flags=_section(Flags, doc.get("flags"), "flags"),
            seeds=tuple(int(s) for s in doc.get("seeds", range(1, 9))),
            score=doc.get("score", "msp"),
            aupr_positive=doc.get("aupr_positive", "id"),
            ladder=tuple(doc.get("ladder", ())),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load(path) -> ExperimentConfig:
    text = Path(path).read_text()
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return from_dict(doc or {})


def dump(cfg: ExperimentConfig, path) -> None:
    doc = cfg.to_dict()
    if str(path).endswith(".json"):
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    else:
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def balanced_task() -> ExperimentConfig:
    """Default balanced task with the full method ladder."""
    return ExperimentConfig(name="balanced", ladder=METHODS)


def long_tailed_task(imbalance_ratio: float = 0.01) -> ExperimentConfig:
    """Long-tailed variant: 100:1 class imbalance, stronger distillation, longer fine-tuning.

    Tail classes see few batches per epoch, so fine-tuning runs 3x longer and the
    teacher's soft targets carry more weight to hold tail accuracy under the strong
    outlier term.
    """
    base = ExperimentConfig()
    data = replace(base.data, id_train=replace(base.data.id_train, imbalance_ratio=imbalance_ratio))
    return ExperimentConfig(
        name="long_tailed",
        data=data,
        loss=replace(base.loss, kd=16.0),
        optimizer=replace(base.optimizer, epochs_finetune=60),
        ladder=METHODS,
    )


PRESETS = {"balanced": balanced_task, "long_tailed": long_tailed_task}
