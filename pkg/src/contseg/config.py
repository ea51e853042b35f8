"""Experiment configuration: schema, strict validation, sequence assembly.

A config file fully determines a run. Unknown keys are rejected up front
(naming the offending key) so typos cannot silently fall back to defaults;
CLI flags may override seed, method, and output directory with documented
precedence flag > file > default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from contseg.errors import ConfigError
from contseg.model import ModelCapacity
from contseg.taskbench.samples import AugmentPolicy, Dataset
from contseg.taskbench.shapeworld import DomainParams, ShapeWorldConfig, generate_shapeworld
from contseg.taskbench.splits import (
    ClassPartition,
    TaskSequence,
    build_class_incremental_split,
    build_domain_incremental_sequence,
)
from contseg.taskbench.io import load_dataset
from contseg.trainer import (
    EarlyStopConfig,
    MethodConfig,
    OptimizerConfig,
    PostFirstTask,
    ScheduleConfig,
)

CONFIG_VERSION = 1

_DOMAIN_KEYS = {
    "name", "background", "class_colors", "hue_shift", "noise_std",
    "texture", "texture_period", "texture_contrast",
}
_SHAPEWORLD_KEYS = {
    "image_size", "num_classes", "num_images", "shapes_per_image",
    "shape_size_range", "class_weights", "seed", "domains",
}
_PATH_KEYS = {"root", "split", "domain_tag"}
_SCHEMA = {
    "schema_version": None,
    "experiment": {"name", "seed", "out_dir"},
    "protocol": None,
    "data": {"shapeworld", "paths", "num_classes"},
    "partition": {"subsets", "exclusive"},
    "shared_classes": None,
    "split_seed": None,
    "holdout_fraction": None,
    "model": {"widths", "dilations"},
    "method": {"name", "lam", "buffer_capacity"},
    "train": {
        "lr", "momentum", "beta2", "weight_decay", "power", "max_epochs",
        "batch_size", "patience", "lowered_lr", "freeze_norm",
        "n_importance_samples", "importance_mode", "augment", "eval_batch",
        "cil_weight_floor", "cil_weight_ceil",
    },
}
_AUGMENT_KEYS = {"crop_ratio", "scale_range", "crop_size"}


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key {sorted(unknown)[0]!r} in section {where!r}"
        )


def _as_pair(value, where: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{where} must be a 2-element list, got {value!r}")
    return tuple(value)


@dataclass
class PathSpec:
    root: str
    split: str = "train"
    domain_tag: str = ""


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    out_dir: str | None = None
    protocol: str = "class_incremental"
    shapeworld: list[ShapeWorldConfig] = field(default_factory=list)
    paths: list[PathSpec] = field(default_factory=list)
    num_classes: int | None = None
    partition: ClassPartition | None = None
    shared_classes: tuple[int, ...] | None = None
    split_seed: int = 0
    holdout_fraction: float = 0.1
    capacity: ModelCapacity = field(default_factory=ModelCapacity)
    method: MethodConfig = field(default_factory=MethodConfig)

    def validate(self) -> None:
        if self.protocol not in ("class_incremental", "domain_incremental"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if bool(self.shapeworld) == bool(self.paths):
            raise ConfigError("data must declare exactly one of shapeworld/paths")
        if self.protocol == "class_incremental" and self.partition is None:
            raise ConfigError("class_incremental requires a partition section")
        if self.paths and self.num_classes is None:
            raise ConfigError("data.paths requires data.num_classes")


def _parse_domain(d: dict, where: str) -> DomainParams:
    _require_keys(d, _DOMAIN_KEYS, where)
    kwargs = dict(d)
    if "background" in kwargs:
        kwargs["background"] = tuple(kwargs["background"])
    if "class_colors" in kwargs and kwargs["class_colors"] is not None:
        kwargs["class_colors"] = tuple(tuple(c) for c in kwargs["class_colors"])
    return DomainParams(**kwargs)


def _parse_shapeworld(d: dict) -> list[ShapeWorldConfig]:
    _require_keys(d, _SHAPEWORLD_KEYS, "data.shapeworld")
    domains = d.get("domains") or [{}]
    base_seed = int(d.get("seed", 0))
    configs = []
    for i, dom in enumerate(domains):
        params = _parse_domain(dict(dom), f"data.shapeworld.domains[{i}]")
        if params.name == "default" and len(domains) > 1:
            raise ConfigError(
                f"data.shapeworld.domains[{i}] needs an explicit name"
            )
        kwargs = {}
        if "image_size" in d:
            kwargs["image_size"] = _as_pair(d["image_size"], "data.shapeworld.image_size")
        if "num_classes" in d:
            kwargs["num_classes"] = int(d["num_classes"])
        if "num_images" in d:
            kwargs["num_images"] = int(d["num_images"])
        if "shapes_per_image" in d:
            kwargs["shapes_per_image"] = _as_pair(
                d["shapes_per_image"], "data.shapeworld.shapes_per_image"
            )
        if "shape_size_range" in d:
            kwargs["shape_size_range"] = _as_pair(
                d["shape_size_range"], "data.shapeworld.shape_size_range"
            )
        if d.get("class_weights") is not None:
            kwargs["class_weights"] = tuple(float(w) for w in d["class_weights"])
        configs.append(
            ShapeWorldConfig(domain=params, seed=base_seed + i, **kwargs)
        )
    return configs


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _require_keys(raw, set(_SCHEMA), "<root>")
    version = raw.get("schema_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")

    cfg = ExperimentConfig()
    exp = raw.get("experiment", {}) or {}
    _require_keys(exp, _SCHEMA["experiment"], "experiment")
    cfg.name = str(exp.get("name", cfg.name))
    cfg.seed = int(exp.get("seed", cfg.seed))
    cfg.out_dir = exp.get("out_dir")

    cfg.protocol = raw.get("protocol", cfg.protocol)

    data = raw.get("data", {}) or {}
    _require_keys(data, _SCHEMA["data"], "data")
    if "shapeworld" in data and data["shapeworld"] is not None:
        cfg.shapeworld = _parse_shapeworld(data["shapeworld"])
    if "paths" in data and data["paths"] is not None:
        specs = []
        for i, p in enumerate(data["paths"]):
            _require_keys(p, _PATH_KEYS, f"data.paths[{i}]")
            specs.append(PathSpec(**p))
        cfg.paths = specs
    if "num_classes" in data and data["num_classes"] is not None:
        cfg.num_classes = int(data["num_classes"])

    if raw.get("partition") is not None:
        part = raw["partition"]
        _require_keys(part, _SCHEMA["partition"], "partition")
        if "subsets" not in part:
            raise ConfigError("partition.subsets is required")
        cfg.partition = ClassPartition(
            subsets=tuple(frozenset(s) for s in part["subsets"]),
            exclusive_classes=frozenset(part.get("exclusive", ())),
        )
    if raw.get("shared_classes") is not None:
        cfg.shared_classes = tuple(int(c) for c in raw["shared_classes"])
    cfg.split_seed = int(raw.get("split_seed", cfg.split_seed))
    cfg.holdout_fraction = float(raw.get("holdout_fraction", cfg.holdout_fraction))

    if raw.get("model") is not None:
        m = raw["model"]
        _require_keys(m, _SCHEMA["model"], "model")
        cfg.capacity = ModelCapacity(
            widths=tuple(m.get("widths", ModelCapacity().widths)),
            dilations=tuple(m.get("dilations", ModelCapacity().dilations)),
        )

    method_sec = raw.get("method", {}) or {}
    _require_keys(method_sec, _SCHEMA["method"], "method")
    train_sec = raw.get("train", {}) or {}
    _require_keys(train_sec, _SCHEMA["train"], "train")

    augment_policy = None
    if train_sec.get("augment") is not None:
        a = train_sec["augment"]
        _require_keys(a, _AUGMENT_KEYS, "train.augment")
        augment_policy = AugmentPolicy(
            crop_ratio=a.get("crop_ratio"),
            scale_range=tuple(a.get("scale_range", (1.0, 2.0))),
            crop_size=tuple(a.get("crop_size", (512, 1024))),
        )

    opt_defaults = OptimizerConfig()
    sched_defaults = ScheduleConfig()
    cfg.method = MethodConfig(
        method=method_sec.get("name", "FT"),
        lam=method_sec.get("lam"),
        buffer_capacity=int(method_sec.get("buffer_capacity", 32)),
        optimizer=OptimizerConfig(
            lr=float(train_sec.get("lr", opt_defaults.lr)),
            momentum=float(train_sec.get("momentum", opt_defaults.momentum)),
            beta2=float(train_sec.get("beta2", opt_defaults.beta2)),
            weight_decay=float(
                train_sec.get("weight_decay", opt_defaults.weight_decay)
            ),
        ),
        schedule=ScheduleConfig(
            power=float(train_sec.get("power", sched_defaults.power)),
            max_epochs=int(train_sec.get("max_epochs", sched_defaults.max_epochs)),
        ),
        early_stop=EarlyStopConfig(
            patience=int(train_sec.get("patience", EarlyStopConfig().patience))
        ),
        post_first_task=PostFirstTask(
            lowered_lr=train_sec.get("lowered_lr", PostFirstTask().lowered_lr),
            freeze_norm=bool(train_sec.get("freeze_norm", True)),
        ),
        batch_size=int(train_sec.get("batch_size", 6)),
        n_importance_samples=train_sec.get("n_importance_samples"),
        importance_mode=train_sec.get("importance_mode", "mean"),
        augment_policy=augment_policy,
        cil_weight_floor=float(train_sec.get("cil_weight_floor", 0.5)),
        cil_weight_ceil=float(train_sec.get("cil_weight_ceil", 10.0)),
        eval_batch=int(train_sec.get("eval_batch", 8)),
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return from_dict(raw or {})


def build_datasets(cfg: ExperimentConfig) -> list[Dataset]:
    if cfg.shapeworld:
        return [generate_shapeworld(sw) for sw in cfg.shapeworld]
    out = []
    for spec in cfg.paths:
        out.append(
            load_dataset(
                spec.root,
                split=spec.split,
                num_classes=cfg.num_classes,
                domain_tag=spec.domain_tag,
            )
        )
    return out


def build_sequence(cfg: ExperimentConfig) -> TaskSequence:
    datasets = build_datasets(cfg)
    if cfg.protocol == "class_incremental":
        if len(datasets) != 1:
            raise ConfigError(
                "class_incremental expects exactly one dataset, got "
                f"{len(datasets)}"
            )
        return build_class_incremental_split(
            datasets[0], cfg.partition, cfg.split_seed, cfg.holdout_fraction
        )
    shared = cfg.shared_classes
    if shared is None:
        present: set[int] = set()
        for d in datasets:
            present |= d.present_classes()
        shared = tuple(sorted(present))
    return build_domain_incremental_sequence(
        datasets, shared, cfg.split_seed, cfg.holdout_fraction
    )
