"""Experiment configuration: one JSON document, sections per module.

Precedence is flag > ``GRDN_SEED`` (seed only) > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .formats import canonical_json, sha256_bytes


@dataclass
class DataConfig:
    source: str = "mnist"
    mnist_dir: str = "data/mnist"
    train_limit: int | None = 20000
    test_limit: int | None = None
    blob_classes: int = 3
    blob_dim: int = 20
    blob_per_class: int = 200
    blob_separation: float = 6.0


@dataclass
class BaseConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [300, 100])
    optimizer: str = "sgd"
    lr: float = 0.1
    batch_size: int = 32
    max_epochs: int = 20
    thresholds: list[float] = field(default_factory=lambda: [0.92, 0.96])
    eval_every: int | None = 20


@dataclass
class FeatureConfig:
    q: float | None = 85.0
    norm: list[str] = field(default_factory=lambda: ["scale", "power:0.5"])
    label_mask_fraction: float | None = None
    augment_sigma: float = 0.0
    label_mode: str = "random"


@dataclass
class GradNetConfig:
    block_sizes: list[int] = field(default_factory=lambda: [5, 100, 25])
    wiring: str = "adjacent"
    activation: str = "relu"
    dropout_p: float | None = None
    batchnorm: bool = False
    optimizer: str = "sgd"
    lr: float | None = None
    epochs: int = 5
    batch_size: int = 32
    eval_each_epoch: bool = False


@dataclass
class RbmConfig:
    hidden: int = 16
    epochs: int = 1
    cd_k: int = 1
    lr: float = 0.1
    batch_size: int = 20
    train_count: int = 5000
    test_count: int | None = 10000
    binarize_threshold: float = 0.5
    classifier_epochs: int = 10
    classifier_lr: float = 0.01


@dataclass
class KernelConfig:
    input_dim: int = 3
    hidden_dims: list[int] = field(default_factory=lambda: [2])
    num_classes: int = 3
    samples: int = 32
    reparametrizations: int = 20
    gram_sets: int = 50


@dataclass
class GraphConfig:
    alpha: float = 0.1
    q: float | None = 99.9
    sample: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gradnet: GradNetConfig = field(default_factory=GradNetConfig)
    rbm: RbmConfig = field(default_factory=RbmConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        """Content hash of the resolved config (paths excluded so reruns elsewhere match)."""
        d = self.to_dict()
        d.pop("out_dir")
        return sha256_bytes(canonical_json(d))[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}


def _merge(obj, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)


def from_dict(values: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _merge(cfg, values, "")
    return cfg


def load_config(path: str | None = None, overrides: list[str] | None = None,
                env: dict | None = None) -> ExperimentConfig:
    """Resolve defaults, then the JSON file, then ``GRDN_SEED``, then ``key.path=value`` overrides."""
    cfg = ExperimentConfig()
    if path:
        try:
            with open(path) as f:
                _merge(cfg, json.load(f), "")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    env = os.environ if env is None else env
    if env.get("GRDN_SEED"):
        try:
            cfg.seed = int(env["GRDN_SEED"])
        except ValueError as exc:
            raise ConfigError("GRDN_SEED must be an integer") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: dict = {}
        cur = nested
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        _merge(cfg, nested, "")
    if cfg.seed < 0:
        raise ConfigError("seed must be unsigned")
    return cfg
