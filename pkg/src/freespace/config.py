"""Pipeline configuration: nested dataclasses loaded strictly from JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError


@dataclass
class GridConfig:
    u_cell: float = 1.0
    max_disparity: int = 64
    metric_cell: float = 0.2
    metric_depth: float = 40.0
    metric_lateral: float = 20.0


@dataclass
class CovarianceConfig:
    sigma_u: float = 0.5
    sigma_v: float = 0.5
    sigma_d: float = 1.0
    sigma_d_per_disparity: float = 0.0


@dataclass
class LikelihoodConfig:
    mode: str = "standard"
    truncation: float = 4.0
    stride: int = 1


@dataclass
class SegmentationConfig:
    method: str = "threshold"
    threshold: float = 40.0
    ordinal: int = 2
    smooth: int = 0


@dataclass
class DisparityConfig:
    source: str = "auto"  # auto | file | block_match
    radius: int = 3
    max_disparity: int = 64
    uniqueness_ratio: float = 0.9
    workers: int = 1


@dataclass
class MatchingConfig:
    harris_sigma: float = 1.0
    harris_k: float = 0.04
    harris_rel_threshold: float = 0.01
    nms_radius: int = 3
    max_corners: int = 800
    patch_radius: int = 5
    search_radius: int = 40
    min_ncc: float = 0.8
    fb_tolerance: float = 1.0


@dataclass
class RansacSection:
    degree: int = 1
    sample_fraction: float = 0.4
    iterations: int = 20
    epsilon: float = 2.0
    seed: int = 0
    trim_fraction: float = 0.5
    trim_steps: int = 10


@dataclass
class MappingConfig:
    transform_source: str = "features"  # features | odometry
    odometry_file: str | None = None
    rigid: bool = True
    threshold: float | None = None  # defaults to segmentation.threshold
    tile: int = 64
    visibility: bool = True


@dataclass
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    covariance: CovarianceConfig = field(default_factory=CovarianceConfig)
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    disparity: DisparityConfig = field(default_factory=DisparityConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    ransac: RansacSection = field(default_factory=RansacSection)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        cfg = _build(cls, d or {}, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(data)

    def override(self, dotted: str, value: Any) -> "PipelineConfig":
        """Copy with one ``section.key`` replaced; the value is coerced to the field type."""
        d = self.to_dict()
        *path, last = dotted.split(".")
        node = d
        for p in path:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[p]
        if not isinstance(node, dict) or last not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node[last] = value
        return PipelineConfig.from_dict(d)

    def validate(self) -> None:
        if self.likelihood.mode not in ("standard", "paper-literal"):
            raise ConfigError(f"likelihood.mode: unknown mode {self.likelihood.mode!r}")
        if self.segmentation.method not in ("threshold", "transition"):
            raise ConfigError(f"segmentation.method: unknown method {self.segmentation.method!r}")
        if self.disparity.source not in ("auto", "file", "block_match"):
            raise ConfigError(f"disparity.source: unknown source {self.disparity.source!r}")
        if self.mapping.transform_source not in ("features", "odometry"):
            raise ConfigError(f"mapping.transform_source: unknown source {self.mapping.transform_source!r}")
        if self.ransac.degree not in (1, 2, 3):
            raise ConfigError("ransac.degree must be 1, 2 or 3")
        if self.likelihood.stride < 1:
            raise ConfigError("likelihood.stride must be >= 1")
        if self.likelihood.truncation <= 0:
            raise ConfigError("likelihood.truncation must be > 0")
        if self.segmentation.threshold < 0:
            raise ConfigError("segmentation.threshold must be >= 0")

    @property
    def map_threshold(self) -> float:
        t = self.mapping.threshold
        return self.segmentation.threshold if t is None else t


def _coerce(tp, value, key):
    if value is None:
        return None
    try:
        if tp in ("float", "float | None", float):
            return float(value)
        if tp in ("int", int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if tp in ("bool", bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError("not a boolean")
            return bool(value)
        if tp in ("str", "str | None", str):
            return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: invalid value {value!r} ({e})") from None
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown config key '{prefix}{k}'")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        key = f"{prefix}{name}"
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], key + ".")
        else:
            kwargs[name] = _coerce(f.type, data[name], key)
    return cls(**kwargs)
