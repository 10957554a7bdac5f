"""Pipeline configuration with validation on load."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorParams
from .errors import ConfigError
from .ppf import DEFAULT_ANGLE_STEP
from .refiner import RefineParams
from .verifier import VerifierParams


@dataclass
class GraphParams:
    # None means 2 * codebook distance step
    voxel_size: float | None = None
    # absolute overlap thresholds in voxels; None means the fractions below
    # times the smallest per-camera voxel count
    alpha_l: float | None = None
    alpha_h: float | None = None
    low_fraction: float = 0.05
    high_fraction: float = 0.3

    def __post_init__(self):
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not 0 <= self.low_fraction <= self.high_fraction:
            raise ValueError("need 0 <= low_fraction <= high_fraction")
        if self.alpha_l is not None and self.alpha_h is not None and not 0 <= self.alpha_l <= self.alpha_h:
            raise ValueError("need 0 <= alpha_l <= alpha_h")


@dataclass
class PipelineConfig:
    tau: float = 0.05
    angle_step: float = DEFAULT_ANGLE_STEP
    detector: DetectorParams = field(default_factory=DetectorParams)
    verifier: VerifierParams = field(default_factory=VerifierParams)
    graph: GraphParams = field(default_factory=GraphParams)
    refine: RefineParams = field(default_factory=RefineParams)
    # input coordinates are multiplied by this on load
    unit_scale: float = 1.0
    # per-view point budget for refinement
    max_points_per_view: int = 30000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau < 0.2:
            raise ValueError(f"tau must lie in (0, 0.2), got {self.tau}")
        if not 0 < self.angle_step < np.pi:
            raise ValueError("angle_step must lie in (0, pi)")
        if not self.unit_scale > 0:
            raise ValueError("unit_scale must be positive")
        if self.max_points_per_view < 100:
            raise ValueError("max_points_per_view must be at least 100")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        sections = {"detector": DetectorParams, "verifier": VerifierParams, "graph": GraphParams, "refine": RefineParams}
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value, key)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown configuration key '{key}'")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_dict(d)


def _build(kind, value, section):
    if not isinstance(value, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(sorted(unknown))}")
    base = kind()
    merged = {**dataclasses.asdict(base), **value}
    for k, v in merged.items():
        if isinstance(v, list):
            merged[k] = tuple(v)
    try:
        return kind(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from None
