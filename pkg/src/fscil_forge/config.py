"""Run configuration."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .geometry import AugmentationConfig


@dataclass
class RunConfig:
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float = 0.1
    alpha: float = 1.0
    base_epochs: int = 10
    inc_epochs: int = 20
    batch_size: int = 32
    # protocol
    shots: int = 5
    memory_per_class: int = 1
    n_aug: int = 2
    # rendering
    n_views: int = 6
    view_distance: float = 2.0
    resolution: int = 32
    fov_deg: float = 60.0
    point_radius_px: int = 1
    # small per-axis angles: cameras are axis-aligned and shapes canonically posed
    rotation_range: tuple = (-math.pi / 12, math.pi / 12)
    distance_scale_range: tuple = (0.9, 1.1)
    # dimensions; hidden sizes default to ``dim``
    dim: int = 32
    point_dim: int = 64
    hidden: int | None = None
    point_hidden: int | None = None
    # components
    energy_fraction: float = 0.95
    rfe_enabled: bool = True
    snc_enabled: bool = True
    cl_enabled: bool = True
    rfe_target: str = "fg"
    cont_use_rcs: bool = True
    ncacc_literal: bool = False
    # seeds; encoder weights are "pre-trained", so they do not follow master_seed
    master_seed: int = 0
    encoder_seed: int = 0

    def __post_init__(self):
        self.rotation_range = tuple(self.rotation_range)
        self.distance_scale_range = tuple(self.distance_scale_range)
        self.validate()

    @property
    def hidden_dim(self) -> int:
        return self.hidden or self.dim

    @property
    def point_hidden_dim(self) -> int:
        return self.point_hidden or self.dim

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig((self.rotation_range,) * 3, self.distance_scale_range)

    def validate(self) -> None:
        positive = ["lr", "tau", "base_epochs", "inc_epochs", "batch_size", "shots", "n_views",
                    "view_distance", "resolution", "fov_deg", "dim", "point_dim", "energy_fraction"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("weight_decay", "alpha", "memory_per_class", "n_aug", "point_radius_px"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.energy_fraction > 1:
            raise ConfigError("energy_fraction must be <= 1")
        if self.rfe_target not in ("fg", "fd"):
            raise ConfigError("rfe_target must be 'fg' or 'fd'")
        if self.cl_enabled and self.n_aug < 1:
            raise ConfigError("contrastive loss needs n_aug >= 1")
        if self.view_distance * self.distance_scale_range[0] <= 1.0:
            raise ConfigError("scaled camera distance must stay above 1 (outside the unit sphere)")
        self.augmentation().validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotation_range"] = list(self.rotation_range)
        d["distance_scale_range"] = list(self.distance_scale_range)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)
