"""Run configuration: dataclass tree, file loading, merging and hashing.

Precedence is defaults < config file < command-line flags. A resolved
config is plain data, so it serializes into every manifest and can be
loaded back from one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigurationError, InputError

WEIGHTS_DIR_ENV = "SEMCS_WEIGHTS_DIR"


@dataclass
class LossWeights:
    lambda_fg: float = 1.0
    lambda_bg: float = 1.0
    lambda_content: float = 1.0
    lambda_tv: float = 1.0
    lambda_patch: float = 1.0

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            value = float(value)
            if not value >= 0 or value == float("inf"):
                raise InputError(f"{name} must be finite and >= 0, got {value}")
            setattr(self, name, value)


@dataclass
class SegmentationConfig:
    backbone_weights: str | None = None
    patch_size: int = 16
    # resize | pad | strict
    input_mode: str = "resize"
    # key | query | value | token
    feature: str = "key"
    normalize_features: bool = True
    lambda_knn: float = 10.0
    knn_k: int = 7
    # symmetric | unnormalized
    laplacian: str = "symmetric"


@dataclass
class ClipConfig:
    text_weights: str | None = None
    image_weights: str | None = None
    model: str = "RN50"


@dataclass
class PerceptualConfig:
    weights: str | None = None
    layers: tuple[str, ...] = ("conv4_2", "conv5_2")


@dataclass
class EvalConfig:
    dists_weights: str | None = None
    dists_backbone: str | None = None
    nima_weights: str | None = None
    top_k: int = 100


@dataclass
class TrainingConfig:
    iterations: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    lr_step: int = 100
    lr_gamma: float = 0.5
    n_perspective_augs: int = 16
    distortion_scale: float = 0.5
    crop_size: int = 128
    patch_threshold: float | None = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if self.batch_size < 1 or self.n_perspective_augs < 1:
            raise InputError("batch_size and n_perspective_augs must be >= 1")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if not 0.0 <= self.distortion_scale <= 1.0:
            raise InputError("distortion_scale must lie in [0, 1]")
        if self.crop_size < 1:
            raise InputError("crop_size must be >= 1")

    @property
    def patches_per_iteration(self) -> int:
        return self.batch_size * self.n_perspective_augs


@dataclass
class RunConfig:
    # pretrained | seeded
    backend: str = "pretrained"
    backend_seed: int = 0
    device: str = "cpu"
    out: str = "semcs_out"
    image_size: int | None = None
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return run_config_hash(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(data: Mapping) -> str:
    blob = json.dumps(_plain(dict(data)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_config_hash(data: Mapping) -> str:
    """Hash of a run config. The output location does not change the
    computation, so it is left out."""
    return config_hash({k: v for k, v in data.items() if k != "out"})


def _build(cls, data: Mapping):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {cls.__name__}.{key}")
        sub = known[key].type
        nested = _NESTED.get((cls, key))
        if nested is not None and isinstance(value, Mapping):
            value = _build(nested, value)
        elif isinstance(value, list) and sub.startswith("tuple"):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "segmentation"): SegmentationConfig,
    (RunConfig, "clip"): ClipConfig,
    (RunConfig, "perceptual"): PerceptualConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "training"): TrainingConfig,
    (TrainingConfig, "weights"): LossWeights,
}


def deep_update(base: dict, update: Mapping) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_update(out[key], value)
        else:
            out[key] = value
    return out


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a YAML or JSON config. A run manifest is also accepted; its
    ``config`` section is returned so any run can be replayed from it."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{path} must hold a mapping")
    if "config" in data and "config_hash" in data:
        data = data["config"]
    return dict(data)


def dotted_to_nested(flat: Mapping[str, Any]) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def resolve_config(file: str | os.PathLike | None = None,
                   overrides: Mapping[str, Any] | None = None) -> RunConfig:
    data = RunConfig().to_dict()
    if file is not None:
        data = deep_update(data, load_config_file(file))
    if overrides:
        data = deep_update(data, dotted_to_nested(overrides))
    try:
        return _build(RunConfig, data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def weights_path(value: str | None, default_name: str | None = None) -> Path | None:
    """Resolve a weight file path. Relative paths (and unset keys with a
    default file name) are looked up under ``$SEMCS_WEIGHTS_DIR``."""
    root = os.environ.get(WEIGHTS_DIR_ENV)
    if value is None:
        if root is None or default_name is None:
            return None
        value = default_name
    path = Path(value).expanduser()
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    return path
