"""Experiment configuration files.

A config is a YAML mapping with scalar top-level keys and the sections
``data``, ``model``, ``round``, ``privacy`` and ``baseline``::

    method: fedbnn            # fedbnn | isolated | fedavg | dp_fedavg
    seed: 0
    global_rounds: 10
    output_dir: runs/demo
    calibration_bins: 10
    data:
      dataset: synthetic      # synthetic | mnist
      n_clients: 4
      classes_per_client: 2   # or "all"
      setting: small          # small | medium | full
      ad_size: 200
    model:
      large_hidden: [64]
      small_hidden: [16]
      small_fraction: 0.0
    round:
      gamma: 0.7
      local_epochs: 5
    privacy:
      epsilon: 10.0
      delta: 1.0e-5
      query_mode: per_release # per_example | per_release
    baseline:
      clip_norm: 1.0
      noise_multiplier: 1.0

Every key is checked against the schema below; unknown keys and badly typed
values are reported with the line they appear on. JSON is valid YAML, so the
config echo in a run summary can be fed back in unchanged.
"""

from __future__ import annotations

import dataclasses
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SETTINGS
from .federation import RoundConfig

METHODS = ("fedbnn", "isolated", "fedavg", "dp_fedavg")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    mnist_images: str | None = None
    mnist_labels: str | None = None
    classes: int = 4
    dims: int = 10
    pool_per_class: int = 400
    separation: float = 10.0
    n_clients: int = 4
    classes_per_client: int | str = 2
    setting: str = "small"
    per_class: int | None = None
    small_per_class: int | None = None
    mode: str = "disjoint_class_noniid"
    allow_class_overlap: bool = True
    ad_size: int = 200
    ad_source: str = "held-out-pool"

    def __post_init__(self):
        if self.dataset not in ("synthetic", "mnist"):
            raise ValueError(f"dataset must be 'synthetic' or 'mnist', got {self.dataset!r}")
        if self.dataset == "mnist" and not (self.mnist_images and self.mnist_labels):
            raise ValueError("mnist_images and mnist_labels are required for dataset 'mnist'")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {list(SETTINGS)}, got {self.setting!r}")
        if self.mode not in ("disjoint_class_noniid", "iid"):
            raise ValueError(f"mode must be 'disjoint_class_noniid' or 'iid', got {self.mode!r}")
        if isinstance(self.classes_per_client, str) and self.classes_per_client != "all":
            raise ValueError("classes_per_client must be an integer or 'all'")
        if self.ad_source not in ("held-out-pool", "synthetic"):
            raise ValueError("ad_source must be 'held-out-pool' or 'synthetic'")
        if self.ad_source == "synthetic" and self.dataset != "synthetic":
            raise ValueError("ad_source 'synthetic' needs dataset 'synthetic'")
        for name in ("n_clients", "ad_size", "classes", "dims"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        for name in ("per_class", "small_per_class"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ModelConfig:
    large_hidden: list[int] = field(default_factory=lambda: [64])
    small_hidden: list[int] = field(default_factory=lambda: [16])
    small_fraction: float = 0.0
    rho_init: float = -3.0
    prior_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ValueError("small_fraction must lie in [0, 1]")
        if any(w < 1 for w in self.large_hidden + self.small_hidden):
            raise ValueError("hidden widths must be positive (large_hidden, small_hidden)")
        if not self.prior_sigma > 0:
            raise ValueError("prior_sigma must be positive")


@dataclass
class PrivacyConfig:
    epsilon: float | None = None
    delta: float = 1e-5
    query_mode: str = "per_example"
    sensitivity_sq: float = 2.0

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.query_mode not in ("per_example", "per_release"):
            raise ValueError("query_mode must be 'per_example' or 'per_release'")
        if not self.sensitivity_sq > 0:
            raise ValueError("sensitivity_sq must be positive")


@dataclass
class BaselineConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")


@dataclass
class ExperimentConfig:
    method: str = "fedbnn"
    seed: int = 0
    global_rounds: int = 10
    output_dir: str = "runs/default"
    calibration_bins: int = 10
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    round: RoundConfig = field(default_factory=RoundConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {list(METHODS)}, got {self.method!r}")
        if self.global_rounds < 0:
            raise ValueError("global_rounds must be >= 0")
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if self.calibration_bins < 1:
            raise ValueError("calibration_bins must be >= 1")
        if self.round.dp_enabled and self.method == "fedbnn" and self.privacy.epsilon is None:
            raise ValueError("privacy.epsilon is required when round.dp_enabled is true")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FLOAT_RE = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")

SECTIONS = {"data": DataConfig, "model": ModelConfig, "round": RoundConfig,
            "privacy": PrivacyConfig, "baseline": BaselineConfig}


# --------------------------------------------------------------------------
# loading


def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(node: yaml.Node):
    return yaml.safe_load(yaml.serialize(node))


def _check_type(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for arm in typing.get_args(tp):
            try:
                return _check_type(value, arm, where)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(f"{where}: {value!r} matches none of "
                          f"{[getattr(a, '__name__', str(a)) for a in typing.get_args(tp)]}")
    if tp is type(None):
        if value is None:
            return None
    elif origin is list:
        (inner,) = typing.get_args(tp)
        if isinstance(value, list):
            return [_check_type(v, inner, where) for v in value]
    elif tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # YAML 1.1 reads exponent forms without a dot (1e-05) as strings
        if isinstance(value, str) and _FLOAT_RE.fullmatch(value.strip()):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    else:
        raise ConfigError(f"{where}: unsupported schema type {tp}")
    raise ConfigError(f"{where}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _build(cls, node: yaml.MappingNode, prefix: str, source: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs, lines = {}, {}
    for key_node, val_node in node.value:
        key = key_node.value
        where = f"{source}:{_line(key_node)}: {prefix}{key}"
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        if key in lines:
            raise ConfigError(f"{where}: duplicate key")
        lines[key] = _line(key_node)
        if key in SECTIONS and cls is ExperimentConfig:
            if not isinstance(val_node, yaml.MappingNode):
                raise ConfigError(f"{where}: expected a mapping")
            kwargs[key] = _build(SECTIONS[key], val_node, f"{key}.", source)
        else:
            kwargs[key] = _check_type(_scalar(val_node), hints[key], where)
    try:
        return cls(**kwargs)
    except ValueError as e:
        msg = str(e)
        if isinstance(e, ConfigError):
            raise
        # point at the offending key when the message names one
        hit = next((k for k in lines if k in msg), None)
        line = lines[hit] if hit else _line(node)
        raise ConfigError(f"{source}:{line}: {prefix}{hit or '(section)'}: {msg}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: invalid YAML: {e}") from None
    if root is None:
        return ExperimentConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{source}:{_line(root)}: top level must be a mapping")
    return _build(ExperimentConfig, root, "", source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from None
    return parse_config(text, str(path))


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in changes.items() if v is not None})
