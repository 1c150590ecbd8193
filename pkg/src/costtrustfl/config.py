"""Experiment configuration and its YAML file format.

A config file is a flat YAML mapping whose keys are the field names of
:class:`ExperimentConfig` (``lambda`` is accepted for ``lam``). Only ``seed``
and ``rounds`` are required. Errors carry the file line of the offending key.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .aggregation import STRATEGIES
from .attacks import ATTACKS
from .errors import ConfigurationError

REQUIRED = ("seed", "rounds")
ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    rounds: int
    # topology
    num_clouds: int = 3
    clients_per_cloud: int = 30
    participants_per_cloud: Optional[int] = None
    # data
    num_classes: int = 10
    samples_per_class: int = 300
    feature_dim: int = 32
    test_fraction: float = 0.2
    alpha: float = 0.5
    reference_size: int = 100
    data_path: Optional[str] = None
    # model and local training
    hidden_dim: int = 16
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    eta: float = 1.0
    # aggregation
    strategy: str = "cost_trustfl"
    gamma: float = 0.9
    trim_fraction: float = 0.2
    krum_f: Optional[int] = None
    full_vector_cosine: bool = False
    # attack
    attack: str = "none"
    malicious_fraction: float = 0.3
    sigma: Optional[float] = None
    scale_factor: float = 10.0
    # economics
    lam: float = 0.3
    c_intra: float = 0.01
    c_cross: float = 0.09
    remote_fraction: float = 0.2
    global_home: Optional[int] = None
    charge_edge_legs: bool = True
    charge_downlink: bool = False
    # ablations
    shapley_weighting: bool = True
    cost_aware_selection: bool = True
    hierarchical: bool = True
    trust_normalization: bool = True

    def __post_init__(self) -> None:
        checks = [
            (self.rounds >= 1, "rounds", "must be at least 1"),
            (self.eta > 0, "eta", "must be positive"),
            (self.num_clouds >= 1, "num_clouds", "must be at least 1"),
            (self.clients_per_cloud >= 1, "clients_per_cloud", "must be at least 1"),
            (self.alpha > 0, "alpha", "must be positive"),
            (self.reference_size >= 0, "reference_size", "must be non-negative"),
            (0.0 <= self.gamma < 1.0, "gamma", "must lie in [0, 1)"),
            (self.lam >= 0, "lambda", "must be non-negative"),
            (0.0 <= self.remote_fraction <= 1.0, "remote_fraction", "must lie in [0, 1]"),
            (self.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}"),
            (self.attack in ATTACKS, "attack", f"must be one of {', '.join(ATTACKS)}"),
            (0.0 <= self.malicious_fraction <= 1.0, "malicious_fraction", "must lie in [0, 1]"),
        ]
        for ok, name, message in checks:
            if not ok:
                raise ConfigurationError(f"{name} {message}", field=name)
        m = self.participants_per_cloud
        if m is not None and not 1 <= m <= self.clients_per_cloud:
            raise ConfigurationError(
                f"participants_per_cloud must lie in [1, {self.clients_per_cloud}]", field="participants_per_cloud"
            )

    @property
    def participants(self) -> int:
        if self.participants_per_cloud is not None:
            return self.participants_per_cloud
        return max(1, math.ceil(0.5 * self.clients_per_cloud))

    @property
    def num_clients(self) -> int:
        return self.num_clouds * self.clients_per_cloud

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **{ALIASES.get(k, k): v for k, v in changes.items()})

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], lines: Optional[Mapping[str, int]] = None) -> "ExperimentConfig":
        return _build(raw, lines or {}, source="<dict>")


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _expected_type(name: str) -> tuple[type, bool]:
    annotation = str(_FIELDS[name].type)
    optional = annotation.startswith("Optional[")
    base = annotation[len("Optional["):-1] if optional else annotation
    return {"int": int, "float": float, "str": str, "bool": bool}[base], optional


def _coerce(name: str, value: Any) -> Any:
    kind, optional = _expected_type(name)
    if value is None:
        if optional:
            return None
        raise ValueError("may not be null")
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "on", "off", "1", "0"):
            return value.lower() in ("true", "yes", "on", "1")
        raise ValueError(f"must be a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool):
            raise ValueError(f"must be an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            if optional and value.lower() in ("none", "null", ""):
                return None
            try:
                return int(value)
            except ValueError:
                pass
        raise ValueError(f"must be an integer, got {value!r}")
    if kind is float:
        if isinstance(value, bool):
            raise ValueError(f"must be a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            if optional and value.lower() in ("none", "null", ""):
                return None
            try:
                return float(value)
            except ValueError:
                pass
        raise ValueError(f"must be a number, got {value!r}")
    if isinstance(value, str) and optional and value.lower() in ("none", "null"):
        return None
    return str(value)


def _build(raw: Mapping[str, Any], lines: Mapping[str, int], source: str) -> ExperimentConfig:
    def where(key: str) -> str:
        return f"{source}:{lines[key]}: " if key in lines else f"{source}: "

    values: dict[str, Any] = {}
    for key, value in raw.items():
        name = ALIASES.get(str(key), str(key))
        if name not in _FIELDS:
            raise ConfigurationError(f"{where(key)}unknown field {key!r}", field=str(key), line=lines.get(key))
        try:
            values[name] = _coerce(name, value)
        except ValueError as exc:
            raise ConfigurationError(f"{where(key)}field {key!r} {exc}", field=str(key), line=lines.get(key)) from None
    for name in REQUIRED:
        if name not in values:
            raise ConfigurationError(f"{source}: missing required field {name!r}", field=name)
    try:
        return ExperimentConfig(**values)
    except ConfigurationError as exc:
        key = "lambda" if exc.field == "lambda" else exc.field
        line = lines.get(key) if key else None
        prefix = f"{source}:{line}: " if line else f"{source}: "
        raise ConfigurationError(prefix + str(exc), field=exc.field, line=line) from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        prefix = f"{source}:{line}: " if line else f"{source}: "
        raise ConfigurationError(f"{prefix}malformed YAML ({getattr(exc, 'problem', exc)})", line=line) from None
    if node is None:
        raw, lines = {}, {}
    else:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigurationError(f"{source}:{node.start_mark.line + 1}: config must be a mapping of key: value")
        lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
        raw = yaml.safe_load(text)
    return _build(raw, lines, source)


def load_config(path: str | Path, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a YAML config and apply flag overrides (flags win)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})") from None
    base = parse_config_text(text, source=str(path))
    if not overrides:
        return base
    merged = base.to_dict()
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return _build(merged, {}, source=f"{path} (with overrides)")


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
