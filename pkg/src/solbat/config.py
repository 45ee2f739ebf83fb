"""Experiment configuration: defaults, validation, and YAML round-trip.

The defaults reproduce the reference study setup: 15-minute sampling, 1 h
dispatch intervals committed 2 h ahead, a 12 h optimization window re-solved
hourly, a 4000-cell pack with the tabulated cell chemistry, and the stated
grid/battery/thermal operating limits. Values the source never states
(converter efficiencies, slack weights) are flagged in the README.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .battery import BatteryParams, battery_params_from_dict, default_battery_params
from .errors import ConfigurationError
from .optimizer import CostParams, HorizonConfig, OperatingLimits


@dataclass(frozen=True)
class EnsembleSettings:
    """Forecast-error learning and sampling knobs."""

    m: int = 10                 # ensemble size
    history_days: int = 2       # rolling window H for moment learning
    segments_per_day: int = 12  # day segmentation S

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError("ensemble size m must be >= 1")
        if self.history_days < 1:
            raise ConfigurationError("history_days must be >= 1")
        if self.segments_per_day < 1 or 24.0 % self.segments_per_day:
            raise ConfigurationError(
                "segments_per_day must divide 24 hours evenly")


@dataclass(frozen=True)
class ExperimentConfig:
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    limits: OperatingLimits = field(default_factory=OperatingLimits)
    battery: BatteryParams = field(default_factory=default_battery_params)
    cost: CostParams = field(default_factory=CostParams)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    eta_pv: float = 0.97        # PV converter efficiency (not from the study)
    eta_b: float = 0.95         # battery converter efficiency (not from the study)
    price_scale: float = 5.0    # multiplier applied to ingested price files
    sim_days: float = 1.0
    initial_soc: float = 0.5
    initial_soh: float = 1.0
    initial_t_bat: float = 298.15
    seed: int = 0
    solver_max_iter: int = 200
    # plant-model mismatch and state-estimator noise (all off by default:
    # the plant is the prediction model and the estimator is perfect)
    plant_i0_sr_scale: float = 1.0
    plant_extra_resistance: float = 0.0
    estimator_soc_noise_std: float = 0.0
    estimator_t_noise_std: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eta_pv <= 1.0 or not 0.0 < self.eta_b <= 1.0:
            raise ConfigurationError("converter efficiencies must be in (0, 1]")
        if self.sim_days <= 0:
            raise ConfigurationError("sim_days must be positive")
        if not 0.0 <= self.initial_soc <= 1.0:
            raise ConfigurationError("initial_soc must be in [0, 1]")
        steps = 24.0 / self.horizon.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigurationError("dt must divide 24 h evenly")
        seg_steps = 24.0 / self.ensemble.segments_per_day / self.horizon.dt
        if abs(seg_steps - round(seg_steps)) > 1e-9:
            raise ConfigurationError(
                "segments_per_day must align with the dt grid")

    @property
    def steps_per_day(self) -> int:
        return round(24.0 / self.horizon.dt)

    @property
    def warmup_days(self) -> int:
        """History needed before the simulated span: persistence lookback
        plus the moment-learning window."""
        return self.ensemble.history_days + 1

    def to_dict(self) -> dict:
        hz = self.horizon
        return {
            "horizon": {"dt": hz.dt, "di": hz.di, "delay": hz.delay,
                        "optimization": hz.optimization,
                        "modification": hz.modification},
            "limits": {k: getattr(self.limits, k)
                       for k in OperatingLimits.__dataclass_fields__},
            "cost": {"n_cell": self.cost.n_cell,
                     "xi_cell": self.cost.xi_cell,
                     "eol_fraction": self.cost.eol_fraction,
                     "q0": self.cost.q0,
                     "w1": np.asarray(self.cost.w1).tolist(),
                     "w2": np.asarray(self.cost.w2).tolist()},
            "ensemble": {"m": self.ensemble.m,
                         "history_days": self.ensemble.history_days,
                         "segments_per_day": self.ensemble.segments_per_day},
            "eta_pv": self.eta_pv,
            "eta_b": self.eta_b,
            "price_scale": self.price_scale,
            "sim_days": self.sim_days,
            "initial_soc": self.initial_soc,
            "initial_soh": self.initial_soh,
            "initial_t_bat": self.initial_t_bat,
            "seed": self.seed,
            "solver_max_iter": self.solver_max_iter,
            "plant_i0_sr_scale": self.plant_i0_sr_scale,
            "plant_extra_resistance": self.plant_extra_resistance,
            "estimator_soc_noise_std": self.estimator_soc_noise_std,
            "estimator_t_noise_std": self.estimator_t_noise_std,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc or {})
        kwargs = {}
        if "horizon" in doc:
            kwargs["horizon"] = HorizonConfig(**doc.pop("horizon"))
        if "limits" in doc:
            kwargs["limits"] = OperatingLimits(**doc.pop("limits"))
        if "cost" in doc:
            c = doc.pop("cost")
            for key in ("w1", "w2"):
                if key in c:
                    c[key] = np.asarray(c[key], dtype=float)
            kwargs["cost"] = CostParams(**c)
        if "ensemble" in doc:
            kwargs["ensemble"] = EnsembleSettings(**doc.pop("ensemble"))
        if "battery" in doc:
            kwargs["battery"] = battery_params_from_dict(doc.pop("battery"))
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs.update(doc)
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        return ExperimentConfig()
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: expected a mapping")
    return ExperimentConfig.from_dict(doc)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
