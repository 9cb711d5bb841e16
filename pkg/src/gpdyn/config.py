"""Run configuration: built-in defaults, TOML file, command-line flags (highest wins)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .engine import ConfigError, GpConfig
from .evaluation import EvalConfig
from .fitness import FitnessConfig
from .simulator import ForecastSpec

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

# section -> key -> default; the single source for file keys, flags and --help text
DEFAULTS: dict[str, dict[str, Any]] = {
    "gp": {
        "pop_gp": 100,
        "gen_gp": 50,
        "p_op": 0.5,
        "t_s": 3,
        "p_r": 0.1,
        "phi": 3,
        "d_max": 6,
        "lambda_max": 7,
        "max_reselect": 10,
        "init_resample": 20,
    },
    "nsga": {
        "pop": 5,
        "gen": 5,
        "r_max": 3,
        "param_low": 0.0,
        "param_high": 1.0,
    },
    "fitness": {
        "weights": [0.25, 0.25, 0.25, 0.25],
        "complexity_mode": "penalizing",
        "corr_threshold": 0.35,
        "min_front_for_corr": 3,
        "horizons": [1, 2, 3],
        "clamp_states": True,
        "clamp_error": True,
        "protocol": "rolling",
    },
    "data": {
        "schema": "",
        "min_days": 40,
        "fractions": [0.6, 0.2, 0.2],
        "strict_unknown": False,
    },
    "eval": {
        "nsga_pop": 20,
        "nsga_gen": 50,
        "repeats": 1,
        "baselines": ["persistence"],
        "label": "model",
    },
}


def load_config_file(path: str | Path | None) -> dict[str, dict[str, Any]]:
    """Parse a TOML config and reject unknown sections or keys."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key in values:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    return data


def merge(file_values: Mapping, flag_values: Mapping) -> dict[str, dict[str, Any]]:
    """Defaults, overridden by file values, overridden by flags that were given (not None)."""
    merged = {section: dict(values) for section, values in DEFAULTS.items()}
    for layer in (file_values, flag_values):
        for section, values in layer.items():
            for key, value in values.items():
                if value is not None:
                    merged[section][key] = value
    return merged


@dataclass
class RunConfig:
    settings: dict[str, dict[str, Any]] = field(default_factory=lambda: merge({}, {}))
    seed: int | None = None
    workers: int = 1

    def forecast(self) -> ForecastSpec:
        f = self.settings["fitness"]
        return ForecastSpec(tuple(f["horizons"]), bool(f["clamp_states"]), bool(f["clamp_error"]), f["protocol"])

    def fitness(self) -> FitnessConfig:
        f, n = self.settings["fitness"], self.settings["nsga"]
        try:
            return FitnessConfig(
                r_max=int(n["r_max"]),
                nsga_pop=int(n["pop"]),
                nsga_gen=int(n["gen"]),
                weights=tuple(float(w) for w in f["weights"]),
                param_bounds=(float(n["param_low"]), float(n["param_high"])),
                forecast=self.forecast(),
                complexity_mode=f["complexity_mode"],
                corr_threshold=float(f["corr_threshold"]),
                min_front_for_corr=int(f["min_front_for_corr"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def gp(self) -> GpConfig:
        g = self.settings["gp"]
        try:
            return GpConfig(
                **{key: type(DEFAULTS["gp"][key])(value) for key, value in g.items()},
                seed=int(self.seed or 0),
                fitness=self.fitness(),
                workers=self.workers,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def evaluation(self) -> EvalConfig:
        e, n, f = self.settings["eval"], self.settings["nsga"], self.settings["fitness"]
        try:
            return EvalConfig(
                horizons=tuple(int(h) for h in f["horizons"]),
                nsga_pop=int(e["nsga_pop"]),
                nsga_gen=int(e["nsga_gen"]),
                repeats=int(e["repeats"]),
                param_bounds=(float(n["param_low"]), float(n["param_high"])),
                clamp_states=bool(f["clamp_states"]),
                clamp_error=bool(f["clamp_error"]),
                baselines=tuple(e["baselines"]),
                label=str(e["label"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def meta(self, command: str) -> dict:
        """Reproducibility header embedded in every artifact."""
        from . import __version__

        return {
            "command": command,
            "config": self.settings,
            "seed": self.seed,
            "version": __version__,
        }
