"""Run configuration (a single JSON file; CLI flags override fields)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .solver import PmlConfig
from .surrogate import TrainConfig


@dataclass
class RunConfig:
    train_subjects: int = 8
    val_subjects: int = 2
    antennas: int = 16
    frequencies: list = field(default_factory=lambda: [4.0e8])
    width: int = 64
    height: int = 64
    spacing: float = 3.0e-3
    phantom_seed: int = 0
    interp_seed: int = 7
    interp_count: int = 8
    solver_tolerance: float = 1e-8
    solver_max_iterations: int = 2000
    pml_thickness: int = 10
    pml_order: float = 3.0
    pml_reflection: float = 1e-6
    # "off", "auto", or {frequency_hz: odd factor}
    refine: object = "off"
    materials: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.frequencies = [float(f) for f in self.frequencies]
        for name in ("train_subjects", "val_subjects", "antennas", "width", "height",
                     "interp_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.frequencies:
            raise ConfigError("at least one frequency is required")
        if not self.spacing > 0:
            raise ConfigError("spacing must be positive")

    @property
    def subjects(self):
        return self.train_subjects + self.val_subjects

    @property
    def pml(self):
        return PmlConfig(self.pml_thickness, self.pml_order, self.pml_reflection)

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def override(self, **fields):
        d = self.to_dict()
        for k, v in fields.items():
            if v is None:
                continue
            if k in TrainConfig.__dataclass_fields__ and k not in d:
                d["train"][k] = v
            else:
                d[k] = v
        return RunConfig.from_dict(d)
