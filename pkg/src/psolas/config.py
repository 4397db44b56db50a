"""Run configuration: a flat ``key = value`` text format with preset-plus-override semantics.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Booleans are ``true``/``false``; floats accept ``inf``. Scenario parameters
left unset fall back to the selected preset. Unknown keys, out-of-range values
and malformed numbers raise :class:`ConfigError` naming the key and line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .montecarlo import Scenario, scenario_preset
from .register_ops import ErrorModel, TimingModel


class ConfigError(ValueError):
    pass


def _prob(v):
    return 0.0 <= v <= 1.0


def _nonneg(v):
    return v >= 0


def _pos(v):
    return v > 0


# key -> (type, validity check, description used in errors)
SCENARIO_KEYS = {
    "alpha": (float, _prob, "a probability in [0, 1]"),
    "address_efficiency": (float, _prob, "a probability in [0, 1]"),
    "crosstalk_prob": (float, _prob, "a probability in [0, 1]"),
    "pump_fail_prob": (float, _prob, "a probability in [0, 1]"),
    "transport_spinflip_prob": (float, _prob, "a probability in [0, 1]"),
    "reconstruct_error_prob": (float, _prob, "a probability in [0, 1]"),
    "background_lifetime": (float, _pos, "positive"),
    "isolation_radius": (int, _nonneg, "non-negative"),
    "t_image": (float, _nonneg, "non-negative"),
    "t_address_per_atom": (float, _nonneg, "non-negative"),
    "t_address_parallel_overhead": (float, _nonneg, "non-negative"),
    "t_shift": (float, _nonneg, "non-negative"),
    "t_pump": (float, _nonneg, "non-negative"),
    "t_pushout": (float, _nonneg, "non-negative"),
    "grid_size": (int, _pos, "positive"),
    "target_size": (int, _pos, "positive"),
    "addressing_mode": (str, lambda v: v in ("serial", "parallel"), "serial or parallel"),
    "max_iterations": (int, _nonneg, "non-negative"),
    "max_time": (float, _pos, "positive"),
    "isolation": (bool, lambda v: True, "true or false"),
}

RUN_KEYS = {
    "mode": (str, lambda v: v in ("sort", "fig1", "ensemble", "sweep"),
             "one of sort, fig1, ensemble, sweep"),
    "scenario": (str, lambda v: v in ("A", "B", "custom"), "A, B or custom"),
    "seed": (int, _nonneg, "a non-negative integer"),
    "trials": (int, _pos, "positive"),
    "out": (str, lambda v: bool(v), "a non-empty path"),
    "error_free": (bool, lambda v: True, "true or false"),
    "export_event_log": (bool, lambda v: True, "true or false"),
    "export_snapshots": (bool, lambda v: True, "true or false"),
    "export_plan": (bool, lambda v: True, "true or false"),
    "fig1_sites": (int, lambda v: v >= 64, "at least 64"),
    "fig1_max_passes": (int, _nonneg, "non-negative"),
    "sweep_alphas": (str, lambda v: bool(v), "a comma-separated list"),
    "sweep_sizes": (str, lambda v: bool(v), "a comma-separated list"),
}


@dataclass(frozen=True)
class RunConfig:
    mode: str = "ensemble"
    scenario: str = "B"
    seed: int = 0
    trials: int = 100
    out: str = "results"
    error_free: bool = False
    export_event_log: bool = True
    export_snapshots: bool = True
    export_plan: bool = True
    fig1_sites: int = 200
    fig1_max_passes: int = 5
    sweep_alphas: str = "0.4,0.6"
    sweep_sizes: str = "25,121,441,961"
    overrides: dict = field(default_factory=dict)

    def with_updates(self, **kwargs) -> "RunConfig":
        run = {k: v for k, v in kwargs.items() if k in RUN_KEYS}
        over = {k: v for k, v in kwargs.items() if k in SCENARIO_KEYS}
        unknown = set(kwargs) - set(run) - set(over)
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
        for key, value in {**run, **over}.items():
            typ, ok, desc = RUN_KEYS.get(key) or SCENARIO_KEYS[key]
            if not ok(value):
                raise ConfigError(f"{key}: value {value!r} out of range (must be {desc})")
        return replace(self, overrides={**self.overrides, **over}, **run)

    def scenario_object(self) -> Scenario:
        """Preset plus overrides, optionally with every error channel switched off."""
        params = dict(self.overrides)
        if "addressing_mode" in params:
            params["mode"] = params.pop("addressing_mode")
        scen = scenario_preset(self.scenario).with_overrides(**params)
        return scen.error_free() if self.error_free else scen

    def fig1_models(self):
        """Error and timing models for the 1D demo: the 1D experimental budget plus overrides."""
        err_names = {f.name for f in fields(ErrorModel)}
        time_names = {f.name for f in fields(TimingModel)}
        errors = ErrorModel(**{k: v for k, v in self.overrides.items() if k in err_names})
        if self.error_free:
            errors = ErrorModel.error_free()
        timing = TimingModel(**{k: v for k, v in self.overrides.items() if k in time_names})
        return errors, timing

    def to_text(self, exclude=()) -> str:
        lines = []
        for f in fields(self):
            if f.name == "overrides" or f.name in exclude:
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        for key in sorted(self.overrides):
            lines.append(f"{key} = {_format(self.overrides[key])}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def _convert(key, typ, raw, lineno):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            value = float(raw)
            if math.isnan(value):
                raise ValueError
            return value
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key}: malformed value {raw!r} "
                          f"(expected {typ.__name__})") from None


def parse_config(text: str) -> RunConfig:
    run, over = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in RUN_KEYS:
            rule, target = RUN_KEYS[key], run
        elif key in SCENARIO_KEYS:
            rule, target = SCENARIO_KEYS[key], over
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        typ, ok, desc = rule
        converted = _convert(key, typ, value, lineno)
        if not ok(converted):
            raise ConfigError(f"line {lineno}: {key}: value {value!r} out of range (must be {desc})")
        target[key] = converted
    cfg = RunConfig(**run, overrides=over)
    try:
        cfg.scenario_object()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"inconsistent parameters: {exc}") from None
    return cfg
