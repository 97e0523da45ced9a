"""Run configuration: a flat YAML mapping validated into a ``RunConfig``.

Every key is optional. Apparatus keys default to the reference setup
(795 nm, 115 uW signal, 1.5 mW local oscillator, 2 MHz drive, RBW 50 Hz,
VBW 5 Hz). Unknown keys are rejected and every diagnostic names the file
line of the offending key.

Apparatus keys
    wavelength_m, signal_power_W, lo_power_W, refractive_index,
    quantum_efficiency, overlap, rbw_Hz, vbw_Hz, mod_freq_Hz,
    displacement_per_volt_m, residual_jitter_rad, amp_var, phase_var_scaled,
    sample_rate_Hz, duration_s

Experiment keys
    experiment        calibrate | sensitivity | sql-compare | analyze-trace
    seed              base seed; per-point seeds are derived from it
    voltages_V        calibration grid (list), default 1..10 V
    sensitivity_voltages_V
                      fundamental-only grid for ``sensitivity``; by default
                      12 log-spaced points spanning predicted fundamental
                      SNRs 0.3 to 30
    out_dir, formats, workers
    snr_threshold, n_floor_offsets
    measured_sensitivity_m_per_rtHz, efficiency      (sql-compare)
    trace_path, harmonic_order                       (analyze-trace)
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import dsp, model
from .calib import DEFAULT_SNR_THRESHOLD
from .errors import ConfigurationError, FringelessError
from .model import DetectionChain, LockPoint, Modulation, OpticalField, QuadratureNoise
from .synth import SynthesisPlan

EXPERIMENTS = ("calibrate", "sensitivity", "sql-compare", "analyze-trace")
FORMATS = ("json", "csv")
DEFAULT_VOLTAGES_V = tuple(float(v) for v in range(1, 11))
SENSITIVITY_GRID_POINTS = 12
# Predicted fundamental SNR at the ends of the default sensitivity grid.
SENSITIVITY_GRID_SPAN = (0.3, 30.0)

# Flat key -> (plan group, field name). All apparatus values are floats.
_APPARATUS: dict[str, tuple[str, str]] = {
    "wavelength_m": ("field", "wavelength_m"),
    "signal_power_W": ("field", "signal_power_W"),
    "lo_power_W": ("field", "lo_power_W"),
    "refractive_index": ("field", "refractive_index"),
    "quantum_efficiency": ("det", "quantum_efficiency"),
    "overlap": ("det", "overlap"),
    "rbw_Hz": ("det", "rbw_Hz"),
    "vbw_Hz": ("det", "vbw_Hz"),
    "mod_freq_Hz": ("mod", "frequency_Hz"),
    "displacement_per_volt_m": ("mod", "displacement_per_volt_m"),
    "residual_jitter_rad": ("lock", "residual_jitter_rad"),
    "amp_var": ("noise", "amp_var"),
    "phase_var_scaled": ("noise", "phase_var_scaled"),
    "sample_rate_Hz": ("plan", "sample_rate_Hz"),
    "duration_s": ("plan", "duration_s"),
}
_GROUPS = {
    "field": OpticalField,
    "det": DetectionChain,
    "mod": Modulation,
    "lock": LockPoint,
    "noise": QuadratureNoise,
}
_RUN_KEYS = {
    "experiment", "seed", "voltages_V", "sensitivity_voltages_V", "out_dir", "formats",
    "workers", "snr_threshold", "n_floor_offsets", "measured_sensitivity_m_per_rtHz",
    "efficiency", "trace_path", "harmonic_order",
}


@dataclass(frozen=True)
class RunConfig:
    plan: SynthesisPlan = dc_field(default_factory=SynthesisPlan)
    experiment: str = "calibrate"
    seed: int = 0
    voltages_V: tuple[float, ...] = DEFAULT_VOLTAGES_V
    sensitivity_voltages_V: tuple[float, ...] | None = None
    out_dir: Path = Path("out")
    formats: tuple[str, ...] = FORMATS
    workers: int = 1
    snr_threshold: float = DEFAULT_SNR_THRESHOLD
    n_floor_offsets: int = dsp.DEFAULT_FLOOR_OFFSETS
    measured_sensitivity_m_per_rtHz: float | None = None
    efficiency: float | None = None
    trace_path: Path | None = None
    harmonic_order: int | None = None
    source: str = "<defaults>"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(
                f"experiment must be one of {', '.join(EXPERIMENTS)}; got {self.experiment!r}"
            )
        if self.experiment in ("calibrate", "sensitivity"):
            _check_grid("voltages_V", self.voltages_V)
        if self.sensitivity_voltages_V is not None:
            _check_grid("sensitivity_voltages_V", self.sensitivity_voltages_V)
        if self.experiment == "sql-compare" and self.measured_sensitivity_m_per_rtHz is None:
            raise ConfigurationError("sql-compare requires measured_sensitivity_m_per_rtHz")
        if self.experiment == "analyze-trace" and self.trace_path is None:
            raise ConfigurationError("analyze-trace requires trace_path")
        if not self.formats or any(f not in FORMATS for f in self.formats):
            raise ConfigurationError(f"formats must be a nonempty subset of {FORMATS}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if self.n_floor_offsets < 1:
            raise ConfigurationError("n_floor_offsets must be >= 1")
        if self.harmonic_order not in (None, 1, 2):
            raise ConfigurationError("harmonic_order must be 1 or 2")

    def sensitivity_grid(self) -> tuple[float, ...]:
        """Explicit grid, or one bracketing the predicted SNR-1 crossing."""
        if self.sensitivity_voltages_V is not None:
            return self.sensitivity_voltages_V
        n = model.effective_photon_number(self.plan.field, self.plan.det)
        kn = self.plan.field.wavenumber * self.plan.field.refractive_index
        dpv = self.plan.mod.displacement_per_volt_m
        if not (n > 0 and dpv > 0):
            raise ConfigurationError(
                "cannot place a default sensitivity grid without signal power and piezo slope"
            )
        v1 = 1.0 / (2.0 * math.sqrt(n) * kn * dpv)
        lo, hi = SENSITIVITY_GRID_SPAN
        return tuple(float(v) for v in np.geomspace(lo * v1, hi * v1, SENSITIVITY_GRID_POINTS))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, plan=self.plan.with_(rng_seed=seed))


def _check_grid(name: str, grid) -> None:
    if len(grid) == 0:
        raise ConfigurationError(f"{name} must be nonempty")
    arr = np.asarray(grid, dtype=float)
    if np.any(arr < 0) or np.any(np.diff(arr) <= 0):
        raise ConfigurationError(f"{name} must be non-negative and strictly increasing")


# -- coercion -----------------------------------------------------------------


def _number(value: Any) -> float:
    # YAML 1.1 reads "795e-9" as a string; accept it as a float.
    if isinstance(value, bool):
        raise ValueError("expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return float(value.strip())
    raise ValueError(f"expected a number, got {type(value).__name__}")


def _integer(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("expected an integer, got a boolean")
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().lstrip("+").isdigit():
        return int(value.strip())
    if isinstance(value, float) and value.is_integer():
        return int(value)
    raise ValueError(f"expected an integer, got {value!r}")


def _number_list(value: Any) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ValueError("expected a list of numbers")
    return tuple(_number(v) for v in value)


def _string_list(value: Any) -> tuple[str, ...]:
    if isinstance(value, str):
        return tuple(s.strip() for s in value.split(",") if s.strip())
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    raise ValueError("expected a list of strings")


_RUN_COERCE: dict[str, Callable[[Any], Any]] = {
    "experiment": str,
    "seed": _integer,
    "voltages_V": _number_list,
    "sensitivity_voltages_V": _number_list,
    "out_dir": lambda v: Path(str(v)),
    "formats": _string_list,
    "workers": _integer,
    "snr_threshold": _number,
    "n_floor_offsets": _integer,
    "measured_sensitivity_m_per_rtHz": _number,
    "efficiency": _number,
    "trace_path": lambda v: Path(str(v)),
    "harmonic_order": _integer,
}


# -- loading --------------------------------------------------------------------


def read_mapping(text: str, source: str) -> tuple[dict[str, Any], dict[str, int]]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigurationError(f"{where}: not valid YAML ({getattr(exc, 'problem', exc)})") from exc
    if node is None:
        return {}, {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigurationError(f"{source}:{node.start_mark.line + 1}: top level must be a mapping")
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    loader = yaml.SafeLoader("")
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        line = key_node.start_mark.line + 1
        if not isinstance(key, str):
            raise ConfigurationError(f"{source}:{line}: keys must be strings")
        if key in values:
            raise ConfigurationError(f"{source}:{line}: duplicate key {key!r}")
        if isinstance(value_node, yaml.MappingNode):
            raise ConfigurationError(f"{source}:{line}: {key}: nested mappings are not allowed")
        values[key] = loader.construct_object(value_node, deep=True)
        lines[key] = line
    return values, lines


def config_from_mapping(
    values: dict[str, Any], lines: dict[str, int] | None = None, source: str = "<mapping>"
) -> RunConfig:
    """Validate a flat key/value mapping into a ``RunConfig``."""
    lines = lines or {}

    def where(key: str) -> str:
        return f"{source}:{lines[key]}" if key in lines else source

    unknown = [k for k in values if k not in _APPARATUS and k not in _RUN_KEYS]
    if unknown:
        k = min(unknown, key=lambda k: lines.get(k, 0))
        raise ConfigurationError(f"{where(k)}: unknown key {k!r}")

    grouped: dict[str, dict[str, Any]] = {g: {} for g in (*_GROUPS, "plan")}
    owners: dict[str, list[str]] = {g: [] for g in grouped}
    for key, (group, name) in _APPARATUS.items():
        if key not in values:
            continue
        try:
            grouped[group][name] = _number(values[key])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{where(key)}: {key}: {exc}") from exc
        owners[group].append(key)

    parts: dict[str, Any] = {}
    for group, cls in _GROUPS.items():
        try:
            parts[group] = cls(**grouped[group])
        except FringelessError as exc:
            key = _blame(str(exc), owners[group], _APPARATUS)
            raise ConfigurationError(f"{where(key) if key else source}: {key or group}: {exc}") from exc

    run: dict[str, Any] = {}
    for key in _RUN_KEYS & values.keys():
        try:
            run[key] = _RUN_COERCE[key](values[key])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{where(key)}: {key}: {exc}") from exc

    seed = run.get("seed", 0)
    try:
        plan = SynthesisPlan(**parts, **grouped["plan"], rng_seed=seed)
    except FringelessError as exc:
        key = _blame(str(exc), owners["plan"] + owners["det"] + owners["mod"], _APPARATUS)
        raise ConfigurationError(f"{where(key) if key else source}: {exc}") from exc
    try:
        return RunConfig(plan=plan, source=source, **run)
    except ConfigurationError as exc:
        key = next((k for k in sorted(run, key=lambda k: lines.get(k, 0)) if k in str(exc)), None)
        raise ConfigurationError(f"{where(key) if key else source}: {exc}") from exc


def _blame(message: str, candidates: list[str], table) -> str | None:
    """First configured key whose field name appears in an error message."""
    for key in candidates:
        if key in message or table[key][1] in message:
            return key
    return candidates[0] if candidates else None


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
    values, lines = read_mapping(text, str(path))
    return config_from_mapping(values, lines, str(path))
