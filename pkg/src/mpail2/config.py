"""Run configuration: defaults, YAML loading, CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .planner import PlannerConfig

ABLATIONS = ("full", "no-planning", "no-planning-no-model")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "push2d"
    demos: str | None = None
    out: str = "runs/default"
    seed: int = 0
    episodes: int = 400
    checkpoint_every: int = 50
    ablation: str = "full"

    latent_dim: int = 256
    hidden: tuple = (512, 512)

    lr: float = 3e-4
    encoder_lr: float = 3e-5
    alpha_lr: float = 3e-4
    lambda_return: float = 0.95
    gamma: float = 0.99
    horizon: int = 7
    batch_size: int = 256
    utd: float = 1.0
    rho: float = 0.95
    gp_coef: float = 0.1
    polyak: float = 0.01
    value_grad_clip: float = 5.0
    policy_grad_clip: float = 1.0
    ensemble_size: int = 5

    planner: dict = field(default_factory=dict)

    # optional stopping rules (0 window disables the trailing-success stop)
    early_stop_window: int = 0
    early_stop_rate: float = 0.8
    early_stop_on_first_success: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        positive = ["episodes", "latent_dim", "horizon", "batch_size", "ensemble_size",
                    "lr", "encoder_lr", "alpha_lr", "gamma", "utd",
                    "value_grad_clip", "policy_grad_clip"]
        for name in positive:
            if getattr(self, name) <= 0 and name != "episodes":
                raise ConfigError(f"{name} must be positive")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        for name in ("lambda_return", "rho", "polyak"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.gp_coef < 0:
            raise ConfigError("gp_coef must be >= 0")

    def planner_config(self) -> PlannerConfig:
        try:
            return PlannerConfig(horizon=self.horizon, gamma=self.gamma, **self.planner)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad planner block: {exc}") from exc

    @property
    def no_planning(self) -> bool:
        return self.ablation in ("no-planning", "no-planning-no-model")

    @property
    def no_model(self) -> bool:
        return self.ablation == "no-planning-no-model"

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "TrainConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean) if clean else self
