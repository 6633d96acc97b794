"""Experiment configuration: nested dataclasses loaded from YAML or JSON.

Values can be overridden from the command line with dotted keys, e.g.
``train.pl_update_frequency=10`` or ``pseudo.snippet_sizes=[64,32]``.
Override values are parsed as YAML scalars/lists.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .encoder import DEFAULT_TEMPLATE, EncoderBackend, OpenClipBackend, SyntheticBackend
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class SyntheticParams:
    n_samples: int = 64
    n_val: int = 32
    n_classes: int = 5
    seed: int = 0
    image_size: int = 32
    grid: int = 4


@dataclass
class DatasetConfig:
    name: str = "synthetic"  # 'synthetic' or 'voc2012'
    root: str | None = None
    train_split: str = "train"
    val_split: str | None = "val"
    include_difficult: bool = True
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)

    def __post_init__(self):
        if self.name not in ("synthetic", "voc2012"):
            raise ConfigError(f"dataset.name must be 'synthetic' or 'voc2012', got {self.name!r}")
        if self.name == "voc2012" and not self.root:
            raise ConfigError("dataset.root is required for voc2012")


@dataclass
class BackendConfig:
    name: str = "synthetic"  # 'synthetic' or 'open_clip'
    arch: str = "RN50"
    weights: str | None = None
    allow_download: bool = False
    temperature: float | None = None  # None: the backend's own (learned) value
    template: str = DEFAULT_TEMPLATE
    device: str = "cpu"
    batch_size: int = 64
    dim: int = 32
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("synthetic", "open_clip"):
            raise ConfigError(f"backend.name must be 'synthetic' or 'open_clip', got {self.name!r}")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError("backend.temperature must be > 0")


@dataclass
class PseudoConfig:
    snippet_sizes: list[int] = field(default_factory=lambda: [64, 32, 16])
    zeta: float = 0.5
    init_source: str = "global"  # 'global' or 'final'
    init_snippet_size: int | None = None  # k used when init_source == 'final'
    cache_splits: list[str] = field(default_factory=lambda: ["train"])

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError(f"pseudo.zeta must lie in [0, 1], got {self.zeta}")
        if self.init_source not in ("global", "final"):
            raise ConfigError("pseudo.init_source must be 'global' or 'final'")
        if any(k < 1 for k in self.snippet_sizes):
            raise ConfigError("pseudo.snippet_sizes must all be >= 1")
        if self.init_source == "final" and self.init_snippet_size is None:
            raise ConfigError("pseudo.init_snippet_size is required when init_source is 'final'")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs"
    cache_dir: str | None = None
    run_name: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @property
    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"

    @property
    def dataset_tag(self) -> str:
        if self.dataset.name == "synthetic":
            s = self.dataset.synthetic
            return f"synthetic-c{s.n_classes}-s{s.seed}-n{s.n_samples}-v{s.n_val}-r{s.image_size}"
        return "voc2012"


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(f'{path}{k}' for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(value, hint, f"{path}{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{key} must not be null")
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            value = [value]
        return [_coerce(v, args[0], key) for v in value]
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be true/false, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        return str(value)
    return value


def apply_override(data: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    key, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    parts = key.strip().split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("cdul.presets").iterdir() if p.name.endswith(".yaml"))


def read_config_source(source: str | None) -> dict:
    """Raw dict from a file path or a built-in preset name."""
    if source is None:
        return {}
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        preset = resources.files("cdul.presets") / f"{source}.yaml"
        if not preset.is_file():
            raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(preset_names())})")
        text = preset.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {source}: {exc}") from exc
    return data or {}


def load_config(source: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = read_config_source(source)
    for assignment in overrides or []:
        apply_override(data, assignment)
    # the top-level seed drives training unless train.seed is given explicitly
    train = data.get("train")
    if "seed" in data and (train is None or isinstance(train, dict)):
        data.setdefault("train", {}).setdefault("seed", data["seed"])
    return config_from_dict(data)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def make_backend(config: ExperimentConfig) -> EncoderBackend:
    b = config.backend
    if b.name == "synthetic":
        if config.dataset.name != "synthetic":
            raise ConfigError("the synthetic backend only understands synthetic datasets")
        kwargs = {} if b.temperature is None else {"temperature": b.temperature}
        return SyntheticBackend(config.dataset.synthetic.n_classes, dim=b.dim, noise=b.noise,
                                seed=b.seed, **kwargs)
    return OpenClipBackend(b.arch, b.weights, allow_download=b.allow_download,
                           temperature=b.temperature, device=b.device, batch_size=b.batch_size)
