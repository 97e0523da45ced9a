"""Artifact assembly: versioned report.json and plot-ready CSV tables."""

from __future__ import annotations

import json
import math
from typing import Any, Sequence

from . import calib
from .config import RunConfig
from .dsp import HarmonicMeasurement

SCHEMA_VERSION = calib.REPORT_SCHEMA_VERSION
# Numeric report keys must end in one of these. "_units2" is the square of
# whatever unit an ingested trace declared.
UNIT_SUFFIXES = (
    "_m", "_V", "_Hz", "_rad", "_s", "_W", "_per_V", "_m_per_V", "_m_per_rtHz",
    "_count", "_dimless", "_units2",
)
SWEEP_COLUMNS = ("voltage_V", "snr1", "snr1_err", "snr2", "snr2_err", "ratio", "ratio_err")
SENSITIVITY_COLUMNS = ("voltage_V", "snr1", "displacement_m")


def _clean(value: Any) -> Any:
    # JSON has no NaN; undefined quantities become null.
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def config_section(cfg: RunConfig) -> dict[str, Any]:
    p = cfg.plan
    out: dict[str, Any] = {
        "wavelength_m": p.field.wavelength_m,
        "signal_power_W": p.field.signal_power_W,
        "lo_power_W": p.field.lo_power_W,
        "refractive_index_dimless": p.field.refractive_index,
        "quantum_efficiency_dimless": p.det.quantum_efficiency,
        "overlap_dimless": p.det.overlap,
        "rbw_Hz": p.det.rbw_Hz,
        "vbw_Hz": p.det.vbw_Hz,
        "mod_freq_Hz": p.mod.frequency_Hz,
        "true_displacement_per_volt_m_per_V": p.mod.displacement_per_volt_m,
        "residual_jitter_rad": p.lock.residual_jitter_rad,
        "amp_var_dimless": p.noise.amp_var,
        "phase_var_scaled_dimless": p.noise.phase_var_scaled,
        "sample_rate_Hz": p.sample_rate_Hz,
        "duration_s": p.duration_s,
        "snr_threshold_dimless": cfg.snr_threshold,
        "n_floor_offsets_count": cfg.n_floor_offsets,
    }
    if cfg.experiment in ("calibrate", "sensitivity"):
        out["voltages_V"] = list(cfg.voltages_V)
    if cfg.experiment == "sensitivity":
        out["sensitivity_voltages_V"] = list(cfg.sensitivity_grid())
    if cfg.efficiency is not None:
        out["efficiency_dimless"] = cfg.efficiency
    return out


def envelope(cfg: RunConfig, results: dict[str, Any]) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg.experiment,
        # Seeds are u64; strings keep them exact in every JSON reader.
        "seed": str(cfg.seed),
        "config": config_section(cfg),
        "results": results,
    }


def measurement_dict(m: HarmonicMeasurement) -> dict[str, Any]:
    return {
        "harmonic_order_count": m.order,
        "drive_voltage_V": m.drive_voltage_V,
        "lock_phase_rad": m.lock_phase_rad,
        "rbw_Hz": m.rbw_Hz,
        "signal_power_units2": m.signal_power,
        "signal_power_stderr_units2": m.signal_power_stderr,
        "noise_floor_power_units2": m.noise_floor_power,
        "noise_floor_stderr_units2": m.noise_floor_stderr,
        "snr_amplitude_dimless": m.snr_amplitude,
        "snr_amplitude_stderr_dimless": m.snr_amplitude_stderr,
        "snr_excess_dimless": m.snr_excess,
        "snr_excess_stderr_dimless": m.snr_excess_stderr,
    }


def dumps_json(doc: dict[str, Any]) -> str:
    return json.dumps(_clean(doc), indent=2, allow_nan=False) + "\n"


def unsuffixed_numeric_keys(doc: Any, prefix: str = "") -> list[str]:
    """Paths of numeric entries whose key carries no recognised unit suffix."""
    bad: list[str] = []
    if isinstance(doc, dict):
        for key, value in doc.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict):
                bad.extend(unsuffixed_numeric_keys(value, path))
                continue
            items = value if isinstance(value, list) else [value]
            numeric = any(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in items
            )
            if numeric and not key.endswith(UNIT_SUFFIXES):
                bad.append(path)
    return bad


def _row(values: Sequence[float]) -> str:
    return ",".join("%.17g" % v for v in values) + "\n"


def sweep_csv(sweep: calib.SweepDataset) -> str:
    ratios, ratio_errs = calib.harmonic_ratios(sweep)
    lines = [",".join(SWEEP_COLUMNS) + "\n"]
    for v, m1, m2, r, re in zip(
        sweep.voltages_V, sweep.fundamental, sweep.second_harmonic, ratios, ratio_errs
    ):
        lines.append(_row((
            v, m1.snr_excess, m1.snr_excess_stderr, m2.snr_excess, m2.snr_excess_stderr, r, re
        )))
    return "".join(lines)


def sensitivity_csv(sweep: calib.SweepDataset, displacement_per_volt_m: float) -> str:
    lines = [",".join(SENSITIVITY_COLUMNS) + "\n"]
    for v, m in zip(sweep.voltages_V, sweep.fundamental):
        lines.append(_row((v, m.snr_excess, v * displacement_per_volt_m)))
    return "".join(lines)


def harmonic_csv(m: HarmonicMeasurement) -> str:
    d = measurement_dict(m)
    return ",".join(d) + "\n" + _row(tuple(float(v) for v in d.values()))
