"""Layered run configuration: defaults < config file < command flags.

The file is YAML (JSON works too) with sections ``rules``, ``sampler``,
``gp``, ``planner``, and ``mpr``. Every key is validated against the
schema below before any computation; unknown sections or keys and
type mismatches are rejected with their path.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

import yaml

from rulerob.errors import InputError, SchemaError
from rulerob.planner import CostWeights, PlannerConfig
from rulerob.predicates import RuleParams
from rulerob.sampler import MotionLimits, SamplerConfig

log = logging.getLogger("rulerob")

ENV_CONFIG_PATH = "RULEROB_CONFIG"

_NUMBER = (int, float)

# section -> key -> (expected types, None allowed)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "rules": {
        "a_min": (_NUMBER, False),
        "t_react": (_NUMBER, False),
        "v_max": (_NUMBER, True),
        "a_brake": (_NUMBER, False),
        "mu": (_NUMBER, False),
        "sensor_range": (_NUMBER, False),
    },
    "sampler": {
        "horizon": ((int,), False),
        "dt": (_NUMBER, False),
        "n_v": ((int,), False),
        "n_d": ((int,), False),
        "n_s": ((int,), False),
        "dv_range": ((list, tuple), False),
        "ds_range": ((list, tuple), False),
        "d_range": ((list, tuple), True),
        "a_max": (_NUMBER, False),
        "v_min": (_NUMBER, False),
        "v_max": (_NUMBER, False),
        "d_rate_max": (_NUMBER, False),
    },
    "gp": {
        "n_starts": ((int,), False),
        "max_iter": ((int,), False),
        "tol": (_NUMBER, False),
        "n_points_pair": ((int,), False),
        "n_points_single": ((int,), False),
        "holdout_fraction": (_NUMBER, False),
    },
    "planner": {
        "dt": (_NUMBER, False),
        "horizon": ((int,), False),
        "n_v": ((int,), False),
        "n_d": ((int,), False),
        "n_s": ((int,), False),
        "dv_range": ((list, tuple), False),
        "ds_range": ((list, tuple), False),
        "d_range": ((list, tuple), True),
        "lambda_r": (_NUMBER, False),
        "w_jerk": (_NUMBER, False),
        "w_terminal_speed": (_NUMBER, False),
        "w_lateral": (_NUMBER, False),
        "w_time": (_NUMBER, False),
        "target_speed": (_NUMBER, True),
        "target_d": (_NUMBER, True),
    },
    "mpr": {
        "calibration_margin": (_NUMBER, False),
    },
}


@dataclass(frozen=True)
class GPTrainSettings:
    n_starts: int = 5
    max_iter: int = 200
    tol: float = 1e-6
    n_points_pair: int = 10_000
    n_points_single: int = 3_000
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    """Validated, merged configuration for one CLI invocation."""

    rules: RuleParams = field(default_factory=RuleParams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    gp: GPTrainSettings = field(default_factory=GPTrainSettings)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    calibration_margin: float = 1e-3
    jobs: int = 1


def _validate(raw: Mapping[str, Any], source: str) -> None:
    if not isinstance(raw, Mapping):
        raise SchemaError("config root must be a mapping", source)
    for section, keys in raw.items():
        if section not in _SCHEMA:
            raise SchemaError(f"unknown section {section!r}", source)
        if not isinstance(keys, Mapping):
            raise SchemaError("section must be a mapping", f"{source}:{section}")
        for key, value in keys.items():
            if key not in _SCHEMA[section]:
                raise SchemaError(f"unknown key {key!r}", f"{source}:{section}.{key}")
            types, nullable = _SCHEMA[section][key]
            if value is None:
                if not nullable:
                    raise SchemaError("value must not be null", f"{source}:{section}.{key}")
                continue
            if isinstance(value, bool) or not isinstance(value, types):
                raise SchemaError(
                    f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}",
                    f"{source}:{section}.{key}",
                )


def _pair(value) -> tuple[float, float] | None:
    if value is None:
        return None
    if len(value) != 2:
        raise InputError(f"expected a [low, high] pair, got {value!r}")
    return float(value[0]), float(value[1])


def _apply(config: RunConfig, raw: Mapping[str, Any]) -> RunConfig:
    rules = raw.get("rules", {})
    if rules:
        config = replace(config, rules=replace(
            config.rules, **{k: (float(v) if v is not None else None) for k, v in rules.items()}
        ))
    samp = dict(raw.get("sampler", {}))
    if samp:
        limits = replace(
            config.sampler.limits,
            **{k: float(samp.pop(k)) for k in ("a_max", "v_min", "v_max", "d_rate_max") if k in samp},
        )
        for key in ("dv_range", "ds_range", "d_range"):
            if key in samp:
                samp[key] = _pair(samp[key])
        config = replace(config, sampler=replace(config.sampler, limits=limits, **samp))
    gp = raw.get("gp", {})
    if gp:
        config = replace(config, gp=replace(config.gp, **gp))
    plan = dict(raw.get("planner", {}))
    if plan:
        weights = replace(
            config.planner.weights,
            **{name[2:]: float(plan.pop(name)) for name in
               ("w_jerk", "w_lateral", "w_time") if name in plan},
        )
        if "w_terminal_speed" in plan:
            weights = replace(weights, terminal_speed=float(plan.pop("w_terminal_speed")))
        for key in ("dv_range", "ds_range", "d_range"):
            if key in plan:
                plan[key] = _pair(plan[key])
        config = replace(config, planner=replace(config.planner, weights=weights, **plan))
    mpr_section = raw.get("mpr", {})
    if "calibration_margin" in mpr_section:
        config = replace(config, calibration_margin=float(mpr_section["calibration_margin"]))
    return config


def load_config(path: str | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Build the run configuration.

    ``path`` falls back to the ``RULEROB_CONFIG`` environment variable;
    ``overrides`` is a raw section mapping applied last (command flags).
    """
    config = RunConfig()
    path = path or os.environ.get(ENV_CONFIG_PATH)
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise SchemaError(f"invalid YAML: {exc}", str(path)) from exc
        _validate(raw, str(path))
        config = _apply(config, raw)
        log.info("configuration file %s applied", path)
    if overrides:
        _validate(overrides, "<flags>")
        config = _apply(config, overrides)
        log.info("flag overrides applied: %s", overrides)
    log.debug("effective configuration: %s", config)
    return config
