"""Experiment configuration: one YAML file, dotted-key overrides on top.

The file is a mapping with nested sections (dataset, arch, quantizer,
train, output_dir, plus per-command sections eval/cross_eval/scan/sweep).
CLI ``--set a.b.c=value`` overrides are applied to the raw mapping before
typed construction; values parse as YAML scalars so numbers and lists
work.  The QBF_SEED environment variable, when set, wins over every other
source of the training seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .data import Dataset, load_cifar10_dataset, load_idx_dataset, synthetic_blobs
from .errors import ConfigError
from .models import ModelArch
from .quantizers import QuantizerSpec
from .training import TrainConfig

__all__ = [
    "ExperimentConfig",
    "train_config_from_dict",
    "apply_overrides",
    "load_experiment",
    "load_datasets",
]

_TOP_KEYS = {"dataset", "arch", "quantizer", "train", "output_dir",
             "eval", "cross_eval", "scan", "sweep"}

_TRAIN_KEYS = {"lambda": "lam", "lr": "lr", "batch_size": "batch_size",
               "max_iters": "max_iters", "target_class": "target_class",
               "patience": "patience", "lr_decay_factor": "lr_decay_factor",
               "seed": "seed", "eval_every": "eval_every"}

_DATASET_KEYS = {
    "synthetic": {"kind", "num_classes", "dim", "per_class", "test_per_class",
                  "spread", "seed"},
    "mnist": {"kind", "train_images", "train_labels", "test_images", "test_labels"},
    "cifar10": {"kind", "train_batches", "test_batches"},
}


def train_config_from_dict(d: dict) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"train section must be a mapping, got {d!r}")
    unknown = set(d) - set(_TRAIN_KEYS) - {"init_checkpoint"}
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**{attr: d[key] for key, attr in _TRAIN_KEYS.items() if key in d})


@dataclass
class ExperimentConfig:
    """Typed view of one experiment file."""

    dataset: dict
    arch: ModelArch
    train: TrainConfig
    quantizer: Optional[QuantizerSpec] = None
    output_dir: Optional[str] = None
    init_checkpoint: Optional[str] = None
    eval_section: dict = field(default_factory=dict)
    cross_eval_section: dict = field(default_factory=dict)
    scan_section: dict = field(default_factory=dict)
    sweep_section: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for required in ("dataset", "arch"):
            if required not in raw:
                raise ConfigError(f"config is missing the {required!r} section")
        dataset = raw["dataset"]
        if not isinstance(dataset, dict) or "kind" not in dataset:
            raise ConfigError("dataset section must be a mapping with a 'kind' key")
        kind = str(dataset["kind"])
        if kind not in _DATASET_KEYS:
            raise ConfigError(
                f"unknown dataset kind {kind!r}; expected one of {sorted(_DATASET_KEYS)}"
            )
        unknown = set(dataset) - _DATASET_KEYS[kind]
        if unknown:
            raise ConfigError(f"unknown {kind} dataset keys: {sorted(unknown)}")
        quantizer = None
        if raw.get("quantizer") is not None:
            quantizer = QuantizerSpec.from_dict(raw["quantizer"])
        train_section = raw.get("train", {})
        init_checkpoint = None
        if isinstance(train_section, dict):
            init_checkpoint = train_section.get("init_checkpoint")
        return cls(
            dataset=dict(dataset),
            arch=ModelArch.from_dict(raw["arch"]),
            train=train_config_from_dict(train_section),
            quantizer=quantizer,
            output_dir=raw.get("output_dir"),
            init_checkpoint=init_checkpoint,
            eval_section=dict(raw.get("eval") or {}),
            cross_eval_section=dict(raw.get("cross_eval") or {}),
            scan_section=dict(raw.get("scan") or {}),
            sweep_section=dict(raw.get("sweep") or {}),
        )


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments onto the raw mapping in place;
    values are parsed as YAML scalars/lists."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value_text = item.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = yaml.safe_load(value_text)
        except yaml.YAMLError:
            value = value_text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into non-mapping {part!r}")
            node = nxt
        node[parts[-1]] = value
    return raw


def load_experiment(path, overrides=None, out_override: Optional[str] = None) -> ExperimentConfig:
    """Read the YAML file, apply overrides and QBF_SEED, build the typed
    config."""
    if not os.path.exists(path):
        raise ConfigError(f"config file does not exist: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}")
    if raw is None:
        raw = {}
    apply_overrides(raw, overrides)
    env_seed = os.environ.get("QBF_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"QBF_SEED must be an integer, got {env_seed!r}")
        raw.setdefault("train", {})["seed"] = seed
    cfg = ExperimentConfig.from_dict(raw)
    if out_override is not None:
        cfg.output_dir = out_override
    return cfg


def _require_path(p, what: str) -> str:
    if p is None:
        raise ConfigError(f"dataset section is missing the {what} path")
    if not os.path.exists(p):
        raise ConfigError(f"dataset path does not exist: {p}")
    return p


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Build (train, test) datasets from the dataset section.

    Synthetic blobs draw train and test from the SAME class centers: one
    generator call covers per_class + test_per_class samples per class and
    the round-robin order makes the first block the training split.
    """
    section = cfg.dataset
    kind = section["kind"]
    if kind == "synthetic":
        num_classes = int(section.get("num_classes", 3))
        dim = int(section.get("dim", 16))
        per_class = int(section.get("per_class", 400))
        test_per_class = int(section.get("test_per_class", max(1, per_class // 5)))
        spread = float(section.get("spread", 0.08))
        seed = int(section.get("seed", 7))
        combined = synthetic_blobs(num_classes, dim, per_class + test_per_class,
                                   spread, seed)
        n_train = num_classes * per_class
        idx = list(range(len(combined)))
        train = combined.subset(idx[:n_train], tag="train")
        test = combined.subset(idx[n_train:], tag="test")
        return train, test
    if kind == "mnist":
        train = load_idx_dataset(
            _require_path(section.get("train_images"), "train_images"),
            _require_path(section.get("train_labels"), "train_labels"),
            tag="train",
        )
        test = load_idx_dataset(
            _require_path(section.get("test_images"), "test_images"),
            _require_path(section.get("test_labels"), "test_labels"),
            tag="test",
        )
        return train, test
    if kind == "cifar10":
        train_paths = section.get("train_batches") or []
        test_paths = section.get("test_batches") or []
        if not train_paths or not test_paths:
            raise ConfigError("cifar10 dataset needs train_batches and test_batches lists")
        train = load_cifar10_dataset([_require_path(p, "train batch") for p in train_paths],
                                     tag="train")
        test = load_cifar10_dataset([_require_path(p, "test batch") for p in test_paths],
                                    tag="test")
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")
