"""Line-oriented experiment configuration.

Format: ``[section]`` headers, one ``key = value`` per line, ``#`` comments.
An empty file reproduces the default evaluation settings (0.1 s slots, 500
slots, 100 runs, 10 MHz at 100 m, 1 Mbit packets).  Exactly one ``*_sweep``
key selects the experiment axis; without one, the single default operating
point is run.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .baselines import BASELINE_KINDS
from .params import SystemParams, sufficient_preset, constrained_preset

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "SWEEP_AXES"]

SWEEP_AXES = ("beta", "lambda", "power_budget", "capacitance", "v_out",
              "terminals", "servers", "csi_delay", "eps_floor")

_SYSTEM_KEYS = {
    "preset", "tau", "bandwidth_hz", "bits_per_packet", "distance_m",
    "noise_dbm_per_hz", "kbar", "capacitance", "v_out", "lambda", "alpha",
    "beta", "eps_floor", "delta_floor", "p_max",
}
_EXPERIMENT_KEYS = {
    "policies", "runs", "horizon", "warmup", "base_seed", "power_budget",
    "arrivals", "trace", "trace_rescale", "csi_delay", "out_dir",
    "terminals", "servers", "server_rate", "dump_slots", "window",
    "calibration_runs",
} | {axis + "_sweep" for axis in SWEEP_AXES}

_POSITIVE_KEYS = {"tau", "bandwidth_hz", "bits_per_packet", "distance_m",
                  "kbar", "capacitance", "lambda", "alpha", "beta",
                  "eps_floor", "delta_floor", "p_max", "trace_rescale",
                  "server_rate"}
_NONNEGATIVE_KEYS = {"v_out", "warmup", "csi_delay", "power_budget"}


class ConfigError(Exception):
    """Invalid experiment configuration; message names the key and line."""


@dataclass
class ExperimentConfig:
    params: SystemParams
    policies: List[str] = field(default_factory=lambda: ["proposed"])
    sweep_axis: Optional[str] = None
    sweep_values: List[float] = field(default_factory=list)
    runs: int = 100
    horizon: int = 500
    warmup: int = 0
    base_seed: int = 0
    power_budget: Optional[float] = None
    arrivals: str = "poisson"
    trace: Optional[str] = None
    trace_rescale: Optional[float] = None
    csi_delay: int = 0
    out_dir: str = "results"
    terminals: int = 1
    servers: int = 1
    server_rate: Optional[float] = None
    dump_slots: bool = False
    window: int = 10
    calibration_runs: int = 15


def _parse_lines(text: str):
    """Yield (line_number, section, key, raw_value) for every assignment."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("system", "experiment"):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: assignment outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        yield lineno, section, key.lower(), value


def _to_float(key: str, value: str, lineno: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} is not a number: {value!r}") from None


def _to_int(key: str, value: str, lineno: int) -> int:
    number = _to_float(key, value, lineno)
    if number != int(number):
        raise ConfigError(f"line {lineno}: {key} must be an integer, got {value!r}")
    return int(number)


def _check_range(key: str, value: float, lineno: int) -> None:
    if key in _POSITIVE_KEYS and not value > 0.0:
        raise ConfigError(f"line {lineno}: {key} must be strictly positive, got {value!r}")
    if key in _NONNEGATIVE_KEYS and value < 0.0:
        raise ConfigError(f"line {lineno}: {key} must be nonnegative, got {value!r}")


def parse_config(path) -> ExperimentConfig:
    """Parse and validate an experiment file; empty input means defaults."""
    text = Path(path).read_text()
    system: dict = {}
    experiment: dict = {}
    lines: dict = {}
    for lineno, section, key, value in _parse_lines(text):
        table = system if section == "system" else experiment
        allowed = _SYSTEM_KEYS if section == "system" else _EXPERIMENT_KEYS
        if key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in table:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        table[key] = value
        lines[key] = lineno

    preset_name = system.pop("preset", "sufficient").strip().lower()
    if preset_name not in ("sufficient", "constrained"):
        raise ConfigError(f"line {lines.get('preset', 0)}: unknown preset {preset_name!r}")
    preset = sufficient_preset if preset_name == "sufficient" else constrained_preset

    radio = {}
    overrides = {}
    radio_map = {"bandwidth_hz": "bandwidth_hz", "bits_per_packet": "bits_per_packet",
                 "distance_m": "distance_m", "noise_dbm_per_hz": "noise_dbm_per_hz"}
    system_map = {"tau": "slot_duration", "kbar": "compute_scale",
                  "capacitance": "switched_capacitance", "v_out": "remote_rate",
                  "lambda": "arrival_rate", "alpha": "delay_weight",
                  "beta": "power_weight", "eps_floor": "eps_floor",
                  "delta_floor": "delta_floor", "p_max": "p_max"}
    for key, value in system.items():
        if not value:
            continue
        number = _to_float(key, value, lines[key])
        _check_range(key, number, lines[key])
        if key in radio_map:
            radio[radio_map[key]] = number
        else:
            overrides[system_map[key]] = number
    try:
        params = preset(**radio, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    cfg = ExperimentConfig(params=params)
    sweeps: List[Tuple[str, List[float]]] = []
    for key, value in experiment.items():
        lineno = lines[key]
        if not value:
            continue
        if key.endswith("_sweep"):
            axis = key[: -len("_sweep")]
            values = []
            for item in value.split(","):
                item = item.strip()
                if item:
                    number = _to_float(key, item, lineno)
                    _check_range(axis, number, lineno)
                    values.append(number)
            if not values:
                raise ConfigError(f"line {lineno}: {key} lists no values")
            sweeps.append((axis, values))
        elif key == "policies":
            cfg.policies = [p.strip().lower() for p in value.split(",") if p.strip()]
        elif key in ("runs", "horizon", "warmup", "base_seed", "csi_delay",
                     "terminals", "servers", "window", "calibration_runs"):
            number = _to_int(key, value, lineno)
            _check_range(key, number, lineno)
            setattr(cfg, key, number)
        elif key in ("power_budget", "trace_rescale", "server_rate"):
            number = _to_float(key, value, lineno)
            _check_range(key, number, lineno)
            setattr(cfg, key, number)
        elif key == "arrivals":
            cfg.arrivals = value.strip().lower()
        elif key == "trace":
            cfg.trace = value.strip()
        elif key == "out_dir":
            cfg.out_dir = value.strip()
        elif key == "dump_slots":
            cfg.dump_slots = value.strip().lower() in ("1", "true", "yes", "on")

    if len(sweeps) > 1:
        raise ConfigError("at most one *_sweep key is allowed, got "
                          + ", ".join(axis for axis, _ in sweeps))
    if sweeps:
        cfg.sweep_axis, cfg.sweep_values = sweeps[0]
    else:
        cfg.sweep_axis, cfg.sweep_values = "lambda", [params.arrival_rate]

    if not cfg.policies:
        raise ConfigError("policies must list at least one policy")
    for name in cfg.policies:
        if name != "proposed" and name not in BASELINE_KINDS:
            raise ConfigError(f"unknown policy {name!r}")
    if cfg.runs < 1 or cfg.horizon < 1:
        raise ConfigError("runs and horizon must be at least 1")
    if cfg.arrivals not in ("poisson", "constant", "trace"):
        raise ConfigError(f"unknown arrivals kind {cfg.arrivals!r}")
    if cfg.arrivals == "trace" and not cfg.trace:
        raise ConfigError("arrivals = trace requires a trace path")
    if cfg.sweep_axis in ("terminals", "servers"):
        if any(v != int(v) or v < 1 for v in cfg.sweep_values):
            raise ConfigError(f"{cfg.sweep_axis}_sweep values must be positive integers")
        if cfg.policies != ["proposed"]:
            raise ConfigError("fleet sweeps support only the proposed policy")
    if cfg.sweep_axis == "csi_delay" and any(v != int(v) or v < 0 for v in cfg.sweep_values):
        raise ConfigError("csi_delay_sweep values must be nonnegative integers")
    return cfg
