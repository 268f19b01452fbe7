"""Experiment configuration: one JSON document with a section per subcommand.

Defaults reproduce the benchmark preset.  Unknown keys are rejected so that
typos surface as configuration errors instead of silently using defaults.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .benchmark import PRESET

INEQUALITIES = ("Q", "P-full", "GK", "P-opt", "assumption1")


class ConfigError(ValueError):
    pass


@dataclass
class SimulationConfig:
    tau: float = 1e-3
    t_end: float = 5.0
    initial_conditions: list = field(default_factory=lambda: [1, 2, 3])
    optimal: bool = False
    # trajectories count as coincident below this end-of-window distance
    distance_threshold: float = 1e-2
    # and the residual as decayed below this fraction of its initial norm
    zeta_ratio_threshold: float = 0.05


@dataclass
class MetricSettings:
    kappa: float = 1.0
    gamma: float = 0.1
    beta_x: float = 0.1
    beta_z: float = 0.4
    beta_p: float = 0.032


@dataclass
class CertifyConfig:
    inequalities: list = field(default_factory=lambda: list(INEQUALITIES))
    mesh: str = "desk"


@dataclass
class Lemma3Config:
    n_perturb: int = 100
    epsilon: float = 1e-3
    tau: float = 1e-3
    t_end: float = 5.0
    seed: int = 0
    bound: float = 5e-3
    initial_condition: int = 1


@dataclass
class ExperimentConfig:
    preset: str = PRESET
    workers: Optional[int] = None
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    metric: MetricSettings = field(default_factory=MetricSettings)
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    lemma3: Lemma3Config = field(default_factory=Lemma3Config)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        sections = {"simulation": SimulationConfig, "metric": MetricSettings,
                    "certify": CertifyConfig, "lemma3": Lemma3Config}
        kw = _checked_keys(cls, d, "config")
        for name, sub in sections.items():
            if name in kw:
                kw[name] = sub(**_checked_keys(sub, kw[name], name))
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def validate(self):
        if self.preset != PRESET:
            raise ConfigError(f"unknown preset {self.preset!r}; available: {PRESET}")
        s = self.simulation
        if not s.tau > 0 or not s.t_end > 0:
            raise ConfigError("simulation tau and t_end must be positive")
        for i in s.initial_conditions:
            if i not in (1, 2, 3):
                raise ConfigError(f"initial condition index {i} not in 1..3")
        m = self.metric
        if min(m.kappa, m.gamma, m.beta_x, m.beta_z, m.beta_p) <= 0:
            raise ConfigError("metric constants must be positive")
        for q in self.certify.inequalities:
            if q not in INEQUALITIES:
                raise ConfigError(f"unknown inequality {q!r}; choose from {INEQUALITIES}")
        lm = self.lemma3
        if lm.n_perturb < 1 or not lm.epsilon > 0 or not lm.tau > 0 or not lm.t_end > 0:
            raise ConfigError("lemma3 needs n_perturb >= 1 and positive epsilon, tau, t_end")
        if lm.initial_condition not in (1, 2, 3):
            raise ConfigError("lemma3 initial_condition must be in 1..3")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _checked_keys(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return dict(d)
