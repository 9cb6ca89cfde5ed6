import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

from bev_closure.errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "BEV_CLOSURE_CONFIG"
MAX_BITS = 256


@dataclass
class GroundConfig:
    cell: float = 5.0
    max_iters: int = 20
    inlier_dist: float = 0.5
    eps: float = 1e-4
    enabled: bool = True


@dataclass
class FeatureConfig:
    fast_threshold: int = 20
    max_features: int = 500
    prune: bool = True


@dataclass
class PipelineConfig:
    tau_c: float = 100.0
    max_range: float = 100.0
    nu_map: float = 1.0
    nu_b: float = 0.5
    tau_pr: int = 35
    tau_match: int = 50
    gamma: int = 5
    inlier_tol: float = 1.5
    n_ransac: int = 200
    tau_d: float = 10.0
    exclude_recent: int = 1
    seed: int = 0
    ground: GroundConfig = field(default_factory=GroundConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)

    def to_flat(self) -> Dict[str, Union[int, float, bool]]:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for inner in dataclasses.fields(value):
                    flat[f"{f.name}.{inner.name}"] = getattr(value, inner.name)
            else:
                flat[f.name] = value
        return flat

    def validate(self) -> "PipelineConfig":
        for key in ("tau_c", "max_range", "nu_map", "nu_b", "inlier_tol", "tau_d"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("ground.cell", "ground.inlier_dist", "ground.eps"):
            section, name = key.split(".")
            if not getattr(getattr(self, section), name) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("tau_pr", "tau_match"):
            if not 0 <= getattr(self, key) <= MAX_BITS:
                raise ConfigError(f"{key} must be within 0..{MAX_BITS} bits, got {getattr(self, key)}")
        if self.gamma < 2:
            raise ConfigError(f"gamma must be at least 2, got {self.gamma}")
        if self.n_ransac < 1:
            raise ConfigError(f"n_ransac must be at least 1, got {self.n_ransac}")
        if self.exclude_recent < 0:
            raise ConfigError(f"exclude_recent must be non-negative, got {self.exclude_recent}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.ground.max_iters < 1:
            raise ConfigError("ground.max_iters must be at least 1")
        if not 0 <= self.feature.fast_threshold <= 255:
            raise ConfigError(f"feature.fast_threshold must be within 0..255, got {self.feature.fast_threshold}")
        if self.feature.max_features < 1:
            raise ConfigError("feature.max_features must be at least 1")
        return self


def _field_types() -> Dict[str, type]:
    types = {}
    defaults = PipelineConfig()
    for key, value in defaults.to_flat().items():
        types[key] = type(value)
    return types


FIELD_TYPES = _field_types()


def _coerce(key: str, raw: str) -> Union[int, float, bool]:
    kind = FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: '{text}'")
        if kind is int:
            return int(text)
        return float(text)
    except ValueError as e:
        raise ConfigError(f"invalid value for '{key}': {e}") from e


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    """key = value 形式（# 以降はコメント）を読み、生の文字列で返す"""
    values = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{line_number}: expected 'key = value'")
        key, value = (part.strip() for part in content.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{line_number}: unknown key '{key}'")
        values[key] = value
    return values


def from_flat(values: Mapping[str, Union[str, int, float, bool]]) -> PipelineConfig:
    config = PipelineConfig()
    for key, raw in values.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key '{key}'")
        value = _coerce(key, raw) if isinstance(raw, str) else FIELD_TYPES[key](raw)
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(config, section), name, value)
        else:
            setattr(config, key, value)
    return config.validate()


def parse_overrides(overrides: Optional[List[str]]) -> Dict[str, str]:
    values = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got '{item}'")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key '{key}'")
        values[key] = value
    return values


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[List[str]] = None) -> PipelineConfig:
    """
    設定ファイルと --set の上書きから PipelineConfig を作る

    path が None のときは環境変数 BEV_CLOSURE_CONFIG を見る。どちらもなければ既定値。
    """
    path = path or os.getenv(CONFIG_ENV_VAR)
    values: Dict[str, str] = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config(path.read_text(), str(path)))
    values.update(parse_overrides(overrides))

    config = from_flat(values)
    logger.debug("Configuration loaded", extra={"source": str(path) if path else None, **config.to_flat()})
    return config


def serialize_config(config: PipelineConfig) -> str:
    lines = []
    for key, value in config.to_flat().items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
