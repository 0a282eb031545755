"""Configuration models for corpus generation, training and CLI runs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from obfugraph.cfg_model import OBFUSCATION_CLASSES, OPT_LEVELS, Obfuscation
from obfugraph.errors import ConfigError
from obfugraph.utils import stable_json, write_text

ConfigT = TypeVar("ConfigT")

TREE_KINDS = ("random_forest", "gradient_boosting")
GNN_ARCHITECTURES = ("gcn", "sage", "gin")
READOUTS = ("sum", "mean")

DEFAULT_TREE_GRID: Dict[str, list] = {
    "n_trees": [100, 300],
    "max_depth": [8, 16, None],
}
DEFAULT_BOOSTING_GRID: Dict[str, list] = {**DEFAULT_TREE_GRID, "learning_rate": [0.05, 0.1]}

DEFAULT_GNN_SPACE: Dict[str, Any] = {
    "n_layers": [2, 3, 4, 5],
    "hidden": [32, 64, 128, 256],
    "learning_rate": (1e-4, 1e-2),
    "batch_size": [16, 32, 64],
    "readout": ["sum", "mean"],
}


def _from_mapping(cls: Type[ConfigT], data: Dict[str, Any], where: str) -> ConfigT:
    known = {item.name for item in fields(cls)}  # type: ignore[arg-type]
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}: unknown configuration key {key!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return data


@lru_cache(maxsize=1)
def default_mnemonic_profile() -> Dict[str, float]:
    text = (resources.files("obfugraph") / "data" / "mnemonic_profile.json").read_text(encoding="utf-8")
    return {key: float(value) for key, value in json.loads(text).items()}


@dataclass(frozen=True)
class TreeConfig:
    kind: str = "random_forest"
    n_trees: int = 100
    max_depth: Optional[int] = None
    learning_rate: float = 0.1
    subsample: float = 1.0
    min_samples_leaf: int = 1
    class_weight: bool = True
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.kind not in TREE_KINDS:
            raise ConfigError(f"unknown tree ensemble kind {self.kind!r}")
        if self.n_trees < 1:
            raise ConfigError("n_trees must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be non-negative or null")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TreeConfig":
        return _from_mapping(cls, data, "tree config")


@dataclass(frozen=True)
class GnnConfig:
    architecture: str = "gin"
    n_layers: int = 3
    hidden: int = 64
    readout: str = "sum"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    class_weight: bool = True
    directed: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.architecture not in GNN_ARCHITECTURES:
            raise ConfigError(f"unknown GNN architecture {self.architecture!r}")
        if self.readout not in READOUTS:
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        if self.hidden < 1 or self.batch_size < 1:
            raise ConfigError("hidden and batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not math.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ConfigError("learning_rate must be a positive finite number")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GnnConfig":
        return _from_mapping(cls, data, "gnn config")


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic corpus parameters; every sample is a function of (seed, index, label)."""

    seed: int
    n_functions: int = 100
    block_min: int = 1
    block_max: int = 24
    block_shape: float = 0.15
    instr_min: int = 1
    instr_max: int = 16
    instr_mean: float = 5.0
    mnemonic_profile: Dict[str, float] = field(default_factory=dict)
    projects: Tuple[str, ...] = ("alpha", "bravo", "charlie", "delta", "echo")
    opt_level: str = "O0"
    variants: Tuple[str, ...] = tuple(label.value for label in OBFUSCATION_CLASSES)
    opaque_rate: float = 0.3
    encode_depth: int = 1
    split_rate: float = 0.4
    copy_rate: float = 0.3
    n_shared_functions: int = 0
    project_style_noise: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "projects", tuple(self.projects))
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.block_min < 1:
            raise ConfigError("block_min must be at least 1")
        if self.block_max < self.block_min:
            raise ConfigError("block_max must not be below block_min")
        if self.instr_min < 1 or self.instr_max < self.instr_min:
            raise ConfigError("instruction counts need 1 <= instr_min <= instr_max")
        if self.n_functions < 0 or self.n_shared_functions < 0:
            raise ConfigError("function counts must be non-negative")
        if not self.projects:
            raise ConfigError("at least one pseudo-project is required")
        if self.opt_level not in OPT_LEVELS:
            raise ConfigError(f"opt_level must be one of {OPT_LEVELS}")
        for label in self.variants:
            try:
                parsed = Obfuscation(label)
            except ValueError as exc:
                raise ConfigError(f"unknown variant label {label!r}") from exc
            if parsed is Obfuscation.NONE:
                raise ConfigError("variants list the obfuscated labels only")
        if not 0 < self.opaque_rate <= 1 or not 0 < self.split_rate <= 1 or not 0 < self.copy_rate <= 1:
            raise ConfigError("transform rates must lie in (0, 1]")
        if self.encode_depth < 1:
            raise ConfigError("encode_depth must be at least 1")
        if self.project_style_noise < 0:
            raise ConfigError("project_style_noise must be non-negative")
        profile = self.resolved_profile()
        if any(weight < 0 or not math.isfinite(weight) for weight in profile.values()) or sum(profile.values()) <= 0:
            raise ConfigError("mnemonic profile weights must be finite, non-negative and not all zero")

    def resolved_profile(self) -> Dict[str, float]:
        return dict(self.mnemonic_profile) if self.mnemonic_profile else default_mnemonic_profile()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["projects"] = list(self.projects)
        data["variants"] = list(self.variants)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GeneratorConfig":
        if "seed" not in data:
            raise ConfigError("generator config: missing required key 'seed'")
        return _from_mapping(cls, data, "generator config")

    def save(self, path: Path) -> None:
        write_text(path, stable_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: Path, seed: Optional[int] = None) -> "GeneratorConfig":
        data = _read_json(path)
        if seed is not None:
            data["seed"] = seed
        profile_path = data.pop("mnemonic_profile_path", None)
        if profile_path is not None:
            data["mnemonic_profile"] = _read_json((path.parent / profile_path).resolve())
        return cls.from_dict(data)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved parameters of one CLI invocation, written next to its outputs."""

    subcommand: str
    arguments: Dict[str, Any]
    version: str
    input_digest: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "arguments": self.arguments,
            "version": self.version,
            "input_digest": self.input_digest,
        }

    def save(self, output: Path) -> Path:
        path = output.with_name(output.name + ".run.json")
        write_text(path, stable_json(self.to_dict()) + "\n")
        return path


def load_tree_config(path: Path) -> TreeConfig:
    return TreeConfig.from_dict(_read_json(path))


def load_gnn_config(path: Path) -> GnnConfig:
    return GnnConfig.from_dict(_read_json(path))
