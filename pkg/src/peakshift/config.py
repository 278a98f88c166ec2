"""Run configuration: defaults, file loading, validation, hashing.

The config file is JSON mirroring the DEFAULTS tree below.  Only known keys
are accepted (a typo fails loudly instead of silently running with a
default), and the canonical-JSON hash of the merged config goes into every
run manifest so outputs are traceable to their exact settings.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .classify import AggregateGates, NullGeneratorConfig, PipelineConfig, StrictGates
from .fitting import FitConfig
from .synth import FactorialConfig, PowerGrid

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "load_config",
    "config_hash",
    "build_pipeline",
    "build_fit_config",
    "build_factorial_config",
    "build_power_grid",
    "build_null_generator",
]


class ConfigError(ValueError):
    """Config file malformed, or contains unknown keys."""


DEFAULTS: dict = {
    "seed": 0,
    "engagement": {
        "threshold": 4.0,
    },
    "preprocess": {
        "smoothing_window": 5,
        "min_raw_length": 15,
        "min_smoothed_length": 19,
    },
    "fit": {
        "n_starts": 16,
        "max_iter": 1000,
        "tol": 1e-10,
        "grid_step": 0.25,
        "bounds": {
            "c0": [0.0, 1.0],
            "A": [0.0, 1.0],
            "a": [0.1, 10.0],
            "b": [0.1, 200.0],
            "s": [1.0, 1000.0],
        },
    },
    "aggregate": {
        "max_exposure": None,
        "min_bin_count": 10,
        "r2_min": 0.4,
        "lrt_alpha": 0.05,
        "delta_aic_min": 4.0,
        "ascent_alpha": 0.05,
        "permutation_alpha": 0.05,
        "oos_min": 0.0,
        "decline_min": 0.10,
    },
    "strict": {
        "lrt_alpha": 0.05,
        "delta_aic_min": 2.0,
        "r2_min": 0.05,
        "peak_min": 2.0,
        "decline_min": 0.10,
        "use_decline": True,
        "use_purehill_bic": True,
    },
    "bootstrap": {
        "distortion": 1000,
        "observation": 200,
        "stability_subsample": 100,
        "stability_window": None,
    },
    "permutation": {
        "aggregate": 500,
        "within_user": 10000,
        "null_n_starts": 6,
    },
    "snc": {
        "n_per_condition": 500,
        "length_min": 15,
        "length_max": 75,
    },
    "factorial": {
        "n_users": 1000,
        "peak_median": 14.3,
        "peak_log_sd": 0.6,
        "survival_gamma": 3.0,
        "survival_log_sd": 0.25,
        "survival_floor": 15,
        "n_max_off": 120,
        "amp_base": 0.2,
        "amp_slope": 0.3,
        "amp_noise": 0.03,
        "amp_off": 0.35,
        "onset_a": 2.0,
        "baseline_c0": 0.2,
        "s_min": 20.0,
        "s_max": 80.0,
    },
    "power": {
        "amplitudes": {
            "strong": 0.18,
            "moderate": 0.10,
            "weak": 0.05,
            "very_weak": 0.03,
        },
        "bin_sizes": [100, 200, 500, 1000],
        "reps": 30,
        "n_bins": 60,
        "permutations": 200,
    },
}

# subtrees whose keys are open-ended mappings, not fixed schema
_FREEFORM = {("fit", "bounds"), ("power", "amplitudes")}


def _merge(base: dict, override: dict, path: tuple[str, ...] = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key: {'.'.join(path + (key,))}")
        if isinstance(base[key], dict) and path + (key,) not in _FREEFORM:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(path + (key,))} must be a mapping")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults merged with an optional JSON file and in-process overrides."""
    merged = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must contain a JSON object")
        merged = _merge(merged, user)
    if overrides:
        merged = _merge(merged, overrides)
    return merged


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_fit_config(config: dict, seed: int | None = None, n_starts: int | None = None) -> FitConfig:
    fit = config["fit"]
    bounds = {name: tuple(box) for name, box in fit["bounds"].items()}
    return FitConfig(
        n_starts=n_starts if n_starts is not None else fit["n_starts"],
        max_iter=fit["max_iter"],
        tol=fit["tol"],
        seed=seed if seed is not None else config["seed"],
        grid_step=fit["grid_step"],
        bounds=bounds,
    )


def build_pipeline(config: dict, seed: int | None = None) -> PipelineConfig:
    agg = config["aggregate"]
    strict = config["strict"]
    return PipelineConfig(
        threshold=config["engagement"]["threshold"],
        smoothing_window=config["preprocess"]["smoothing_window"],
        min_raw_length=config["preprocess"]["min_raw_length"],
        min_smoothed_length=config["preprocess"]["min_smoothed_length"],
        fit=build_fit_config(config, seed),
        strict=StrictGates(
            lrt_alpha=strict["lrt_alpha"],
            delta_aic_min=strict["delta_aic_min"],
            r2_min=strict["r2_min"],
            peak_min=strict["peak_min"],
            decline_min=strict["decline_min"],
            use_decline=strict["use_decline"],
            use_purehill_bic=strict["use_purehill_bic"],
        ),
        aggregate=AggregateGates(
            r2_min=agg["r2_min"],
            lrt_alpha=agg["lrt_alpha"],
            delta_aic_min=agg["delta_aic_min"],
            ascent_alpha=agg["ascent_alpha"],
            permutation_alpha=agg["permutation_alpha"],
            oos_min=agg["oos_min"],
            decline_min=agg["decline_min"],
        ),
        max_exposure=agg["max_exposure"],
        min_bin_count=agg["min_bin_count"],
        permutations=config["permutation"]["aggregate"],
        permutation_null_fit=build_fit_config(
            config, seed, n_starts=config["permutation"]["null_n_starts"]
        ),
    )


def build_factorial_config(config: dict, seed: int | None = None) -> FactorialConfig:
    f = config["factorial"]
    return FactorialConfig(
        n_users=f["n_users"],
        peak_median=f["peak_median"],
        peak_log_sd=f["peak_log_sd"],
        survival_gamma=f["survival_gamma"],
        survival_log_sd=f["survival_log_sd"],
        survival_floor=f["survival_floor"],
        n_max_off=f["n_max_off"],
        amp_base=f["amp_base"],
        amp_slope=f["amp_slope"],
        amp_noise=f["amp_noise"],
        amp_off=f["amp_off"],
        onset_a=f["onset_a"],
        baseline_c0=f["baseline_c0"],
        s_min=f["s_min"],
        s_max=f["s_max"],
        seed=seed if seed is not None else config["seed"],
    )


def build_power_grid(config: dict) -> PowerGrid:
    p = config["power"]
    return PowerGrid(
        amplitudes=tuple(p["amplitudes"].items()),
        bin_sizes=tuple(p["bin_sizes"]),
        reps=p["reps"],
        n_bins=p["n_bins"],
    )


def build_null_generator(config: dict) -> NullGeneratorConfig:
    return NullGeneratorConfig(
        length_min=config["snc"]["length_min"],
        length_max=config["snc"]["length_max"],
        smoothing_window=config["preprocess"]["smoothing_window"],
        threshold=config["engagement"]["threshold"],
    )
