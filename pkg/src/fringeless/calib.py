"""Voltage sweeps, harmonic-ratio calibration and sensitivity analysis."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from typing import Any, Sequence

import numpy as np

from . import dsp, model
from .errors import DomainError, FringelessError, InsufficientDataError
from .model import AMPLITUDE_QUADRATURE, PHASE_QUADRATURE, DetectionChain, OpticalField
from .synth import SynthesisPlan, synthesize_trace

log = logging.getLogger(__name__)

DEFAULT_SNR_THRESHOLD = 3.0
ORIGIN_FIT_MIN_SNR = 30.0
LOCK_FUNDAMENTAL = 0
LOCK_SECOND = 1
_MASK64 = (1 << 64) - 1


class LowSnrWarning(UserWarning):
    pass


class SystematicErrorWarning(UserWarning):
    pass


class SaturationWarning(UserWarning):
    pass


class RankError(FringelessError, ValueError):
    pass


class NoSensitivityError(FringelessError, ValueError):
    pass


class SweepError(FringelessError):
    def __init__(self, index: int, voltage: float, cause: Exception):
        super().__init__(f"sweep point {index} ({voltage:g} V): {cause}")
        self.index = index
        self.voltage = voltage


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, voltage_index: int, lock_id: int) -> int:
    """Per-point seed; independent of how many other points the sweep has."""
    return _splitmix64((base_seed & _MASK64) ^ _splitmix64((voltage_index << 8) | lock_id))


@dataclass(frozen=True)
class SweepDataset:
    """Harmonic SNRs across a voltage sweep.

    ``second_harmonic`` is empty for fundamental-only (sensitivity) sweeps.
    """

    voltages_V: tuple[float, ...]
    fundamental: tuple[dsp.HarmonicMeasurement, ...]
    second_harmonic: tuple[dsp.HarmonicMeasurement, ...] = ()
    plan_metadata: dict[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.voltages_V, dtype=float)
        if v.size and np.any(np.diff(v) <= 0):
            raise DomainError("voltages must be strictly increasing")
        if len(self.fundamental) != v.size:
            raise DomainError("one fundamental measurement per voltage is required")
        if self.second_harmonic and len(self.second_harmonic) != v.size:
            raise DomainError("second-harmonic measurements must match the voltages")
        for m in self.fundamental:
            if m.order != 1 or not math.isclose(m.lock_phase_rad, PHASE_QUADRATURE):
                raise DomainError("fundamental entries must be order 1 at lock pi/2")
        for m in self.second_harmonic:
            if m.order != 2 or not math.isclose(m.lock_phase_rad, AMPLITUDE_QUADRATURE, abs_tol=1e-12):
                raise DomainError("second-harmonic entries must be order 2 at lock 0")


def _measure_point(
    plan: SynthesisPlan, order: int, rbw_Hz: float, vbw_Hz: float, n_floor_offsets: int
) -> dsp.HarmonicMeasurement:
    trace = synthesize_trace(plan)
    settings = dsp.ZeroSpanSettings(order * plan.mod.frequency_Hz, rbw_Hz, vbw_Hz)
    return dsp.extract_harmonic_snr(
        trace, plan.mod.frequency_Hz, order, settings, n_floor_offsets=n_floor_offsets
    )


def run_voltage_sweep(
    plan_template: SynthesisPlan,
    voltages: Sequence[float],
    seeds: Sequence[tuple[int, int]] | None = None,
    *,
    include_second: bool = True,
    analysis_rbw_Hz: float | None = None,
    analysis_vbw_Hz: float | None = None,
    n_floor_offsets: int = dsp.DEFAULT_FLOOR_OFFSETS,
    workers: int = 1,
) -> SweepDataset:
    """Measure the fundamental at lock pi/2 and the second harmonic at lock 0.

    ``seeds`` holds one (fundamental, second) pair per voltage; by default they
    are derived from ``plan_template.rng_seed``.
    """
    voltages = [float(v) for v in voltages]
    if seeds is None:
        base = plan_template.rng_seed
        seeds = [
            (derive_seed(base, i, LOCK_FUNDAMENTAL), derive_seed(base, i, LOCK_SECOND))
            for i in range(len(voltages))
        ]
    if len(seeds) != len(voltages):
        raise DomainError("one seed pair per voltage is required")
    rbw = analysis_rbw_Hz or plan_template.det.rbw_Hz
    vbw = analysis_vbw_Hz or min(plan_template.det.vbw_Hz, rbw)

    jobs = []
    for i, (v, (s1, s2)) in enumerate(zip(voltages, seeds)):
        jobs.append((i, v, plan_template.with_(
            drive_voltage_V=v, mean_phase_rad=PHASE_QUADRATURE, rng_seed=s1), 1))
        if include_second:
            jobs.append((i, v, plan_template.with_(
                drive_voltage_V=v, mean_phase_rad=AMPLITUDE_QUADRATURE, rng_seed=s2), 2))

    results: dict[tuple[int, int], dsp.HarmonicMeasurement] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                (i, order): (v, pool.submit(_measure_point, plan, order, rbw, vbw, n_floor_offsets))
                for i, v, plan, order in jobs
            }
            for key, (v, fut) in futures.items():
                try:
                    results[key] = fut.result()
                except FringelessError as exc:
                    raise SweepError(key[0], v, exc) from exc
    else:
        for i, v, plan, order in jobs:
            log.debug("sweep point %d: %g V, order %d", i, v, order)
            try:
                results[(i, order)] = _measure_point(plan, order, rbw, vbw, n_floor_offsets)
            except FringelessError as exc:
                raise SweepError(i, v, exc) from exc

    n = len(voltages)
    return SweepDataset(
        voltages_V=tuple(voltages),
        fundamental=tuple(results[(i, 1)] for i in range(n)),
        second_harmonic=tuple(results[(i, 2)] for i in range(n)) if include_second else (),
        plan_metadata=plan_summary(plan_template),
    )


def plan_summary(plan: SynthesisPlan) -> dict[str, Any]:
    out = {}
    for group in ("field", "det", "mod", "lock", "noise"):
        out.update(asdict(getattr(plan, group)))
    out.pop("drive_voltage_V", None)
    out.pop("mean_phase_rad", None)
    out.update(sample_rate_Hz=plan.sample_rate_Hz, duration_s=plan.duration_s)
    return out


# -- fitting ------------------------------------------------------------------


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    reduced_chi_sq: float
    covariance: float = 0.0
    n_points: int = 0

    def __post_init__(self):
        if self.slope_stderr < 0 or self.intercept_stderr < 0:
            raise DomainError("standard errors must be non-negative")

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x)


def fit_linear_weighted(
    x: Sequence[float],
    y: Sequence[float],
    y_stderr: Sequence[float],
    *,
    absolute_sigma: bool = False,
    intercept: bool = True,
) -> LinearFit:
    """Weighted least-squares line, with intercept unless ``intercept=False``.

    Parameter errors come from the inverse normal matrix. Unless
    ``absolute_sigma`` is set they are scaled by the reduced chi-square, so
    only relative weights matter.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = np.asarray(y_stderr, dtype=float)
    if not (x.shape == y.shape == s.shape) or x.ndim != 1:
        raise DomainError("x, y and y_stderr must be 1-D and equally long")
    if x.size < 3:
        raise InsufficientDataError(f"need at least 3 points, got {x.size}")
    if np.any(s <= 0):
        raise DomainError("standard errors must be positive")
    w = 1.0 / s**2
    if not intercept:
        return _fit_proportional(x, y, w, absolute_sigma)
    sw = w.sum()
    xm = np.dot(w, x) / sw
    dx = x - xm
    sxx = np.dot(w, dx * dx)
    if not sxx > 1e-300 or np.ptp(x) == 0:
        raise RankError("x values are degenerate; slope is undetermined")
    slope = np.dot(w, dx * y) / sxx
    ym = np.dot(w, y) / sw
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    chi2 = float(np.dot(w, resid**2))
    red = chi2 / (x.size - 2)
    var_slope = 1.0 / sxx
    var_int = 1.0 / sw + xm * xm / sxx
    cov = -xm / sxx
    if not absolute_sigma:
        var_slope *= red
        var_int *= red
        cov *= red
    return LinearFit(
        slope=float(slope),
        intercept=float(intercept),
        slope_stderr=math.sqrt(var_slope),
        intercept_stderr=math.sqrt(var_int),
        reduced_chi_sq=red,
        covariance=float(cov),
        n_points=int(x.size),
    )


def _fit_proportional(x, y, w, absolute_sigma) -> LinearFit:
    sxx = np.dot(w, x * x)
    if not sxx > 0:
        raise RankError("x values are all zero; slope is undetermined")
    slope = np.dot(w, x * y) / sxx
    chi2 = float(np.dot(w, (y - slope * x) ** 2))
    red = chi2 / (x.size - 1)
    var = (1.0 if absolute_sigma else red) / sxx
    return LinearFit(float(slope), 0.0, math.sqrt(var), 0.0, red, 0.0, int(x.size))


# -- calibration ----------------------------------------------------------------


@dataclass(frozen=True)
class DisplacementCalibration:
    fit: LinearFit
    displacement_per_volt_m: float
    displacement_per_volt_stderr_m: float
    voltages_used_V: tuple[float, ...]
    ratios: tuple[float, ...]
    ratio_stderrs: tuple[float, ...]
    voltages_excluded_V: tuple[float, ...]
    intercept_consistent: bool


def harmonic_ratios(sweep: SweepDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-voltage Sigma2 / Sigma1 and its propagated standard error."""
    if not sweep.second_harmonic:
        raise InsufficientDataError("sweep has no second-harmonic measurements")
    ratios, errs = [], []
    for m1, m2 in zip(sweep.fundamental, sweep.second_harmonic):
        s1, e1 = m1.snr_excess, m1.snr_excess_stderr
        s2, e2 = m2.snr_excess, m2.snr_excess_stderr
        if s1 <= 0:
            ratios.append(math.nan)
            errs.append(math.nan)
            continue
        r = s2 / s1
        ratios.append(r)
        errs.append(math.hypot(e2 / s1, r * e1 / s1))
    return np.array(ratios), np.array(errs)


def calibrate_displacement(
    sweep: SweepDataset, field: OpticalField, *, snr_threshold: float = DEFAULT_SNR_THRESHOLD
) -> DisplacementCalibration:
    """Displacement per volt from the slope of the harmonic ratio versus voltage.

    Points at zero drive or with a fundamental SNR at or below
    ``snr_threshold`` are dropped. The ratio grows as knd/4, so the
    displacement slope is ``4 * slope / (k n)``.
    """
    ratios, errs = harmonic_ratios(sweep)
    v = np.asarray(sweep.voltages_V)
    snr1 = np.array([m.snr_amplitude for m in sweep.fundamental])
    keep = (v > 0) & (snr1 > snr_threshold) & np.isfinite(ratios) & (errs > 0)
    dropped = v[(v > 0) & ~keep]
    if dropped.size:
        warnings.warn(
            f"excluded {dropped.size} point(s) with fundamental SNR <= {snr_threshold:g}: "
            f"{', '.join(f'{x:g} V' for x in dropped)}",
            LowSnrWarning,
            stacklevel=2,
        )
    if keep.sum() < 4:
        raise InsufficientDataError(
            f"only {int(keep.sum())} usable sweep points; calibration needs 4"
        )
    fit = fit_linear_weighted(v[keep], ratios[keep], errs[keep])
    consistent = abs(fit.intercept) <= 3.0 * fit.intercept_stderr
    if not consistent:
        warnings.warn(
            f"ratio intercept {fit.intercept:.3g} +/- {fit.intercept_stderr:.2g} is "
            "inconsistent with zero; suspect a systematic offset",
            SystematicErrorWarning,
            stacklevel=2,
        )
    kn = field.wavenumber * field.refractive_index
    return DisplacementCalibration(
        fit=fit,
        displacement_per_volt_m=4.0 * fit.slope / kn,
        displacement_per_volt_stderr_m=4.0 * fit.slope_stderr / kn,
        voltages_used_V=tuple(v[keep]),
        ratios=tuple(ratios[keep]),
        ratio_stderrs=tuple(errs[keep]),
        voltages_excluded_V=tuple(v[~keep]),
        intercept_consistent=consistent,
    )


@dataclass(frozen=True)
class GrowthExponents:
    fundamental: float
    fundamental_stderr: float
    second: float
    second_stderr: float
    saturated: bool


def _log_log_fit(voltages, measurements, threshold) -> LinearFit:
    pts = [
        (v, m.snr_excess, m.snr_excess_stderr)
        for v, m in zip(voltages, measurements)
        if v > 0 and m.snr_amplitude > threshold and m.snr_excess > 0
    ]
    if len(pts) < 4:
        order = measurements[0].order if measurements else 0
        raise InsufficientDataError(
            f"harmonic {order} growth fit needs 4 points with SNR > {threshold:g}, got {len(pts)}"
        )
    v, s, e = (np.array(c) for c in zip(*pts))
    return fit_linear_weighted(np.log(v), np.log(s), e / s)


def growth_exponents(
    sweep: SweepDataset, *, snr_threshold: float = DEFAULT_SNR_THRESHOLD
) -> GrowthExponents:
    """Power-law exponents of both harmonics' SNR versus drive voltage."""
    f1 = _log_log_fit(sweep.voltages_V, sweep.fundamental, snr_threshold)
    f2 = _log_log_fit(sweep.voltages_V, sweep.second_harmonic, snr_threshold)
    saturated = f1.slope < 1.0 - max(3.0 * f1.slope_stderr, 0.02)
    if saturated:
        warnings.warn(
            f"fundamental grows as V^{f1.slope:.3f}; the sweep leaves the small-modulation regime",
            SaturationWarning,
            stacklevel=2,
        )
    return GrowthExponents(f1.slope, f1.slope_stderr, f2.slope, f2.slope_stderr, saturated)


@dataclass(frozen=True)
class Sensitivity:
    d_min_m: float
    d_min_per_rtHz_m: float
    d_min_stderr_m: float
    crossing_voltage_V: float
    rbw_Hz: float
    fit: LinearFit


def sensitivity_crossing(
    sweep: SweepDataset,
    displacement_per_volt_m: float,
    rbw_Hz: float,
    *,
    snr_threshold: float = DEFAULT_SNR_THRESHOLD,
    displacement_per_volt_stderr_m: float = 0.0,
    through_origin: bool | None = None,
) -> Sensitivity:
    """Displacement at which the fitted fundamental SNR line reaches 1.

    The line is fitted to points above ``snr_threshold`` and extrapolated,
    since single readings near SNR 1 are the noisiest. When every fitted
    point sits far above the crossing (SNR > 30) the line is forced through
    the origin, as a free intercept cannot be resolved there. The
    per-root-hertz figure divides by sqrt(rbw).
    """
    pts = [
        (v, m.snr_excess, m.snr_excess_stderr)
        for v, m in zip(sweep.voltages_V, sweep.fundamental)
        if v > 0 and m.snr_amplitude > snr_threshold
    ]
    if len(pts) < 3:
        raise InsufficientDataError(
            f"need 3 fundamental points with SNR > {snr_threshold:g}, got {len(pts)}"
        )
    v, s, e = (np.array(c) for c in zip(*pts))
    if through_origin is None:
        through_origin = bool(s.min() > ORIGIN_FIT_MIN_SNR)
    fit = fit_linear_weighted(v, s, e, intercept=not through_origin)
    if fit.slope <= 0:
        raise NoSensitivityError("fundamental SNR does not grow with drive voltage")
    v1 = (1.0 - fit.intercept) / fit.slope
    if v1 <= 0:
        raise NoSensitivityError("fitted SNR line reaches 1 at non-positive voltage")
    # Delta method on v1 = (1 - a) / b.
    da, db = -1.0 / fit.slope, -v1 / fit.slope
    var_v1 = da**2 * fit.intercept_stderr**2 + db**2 * fit.slope_stderr**2 + 2 * da * db * fit.covariance
    d_min = v1 * displacement_per_volt_m
    rel = math.hypot(
        math.sqrt(max(var_v1, 0.0)) / v1,
        displacement_per_volt_stderr_m / displacement_per_volt_m if displacement_per_volt_m else 0.0,
    )
    return Sensitivity(
        d_min_m=d_min,
        d_min_per_rtHz_m=d_min / math.sqrt(rbw_Hz),
        d_min_stderr_m=d_min * rel,
        crossing_voltage_V=v1,
        rbw_Hz=rbw_Hz,
        fit=fit,
    )


@dataclass(frozen=True)
class SqlComparison:
    photon_number: float
    sql_m: float
    sql_per_rtHz_m: float
    ratio: float


def compare_sql(
    d_min_per_rtHz_m: float,
    field: OpticalField,
    det: DetectionChain,
    efficiency: float | None = None,
) -> SqlComparison:
    """Measured per-root-hertz sensitivity against the standard quantum limit."""
    if not d_min_per_rtHz_m > 0:
        raise DomainError("measured sensitivity must be positive")
    if efficiency is None:
        efficiency = det.detection_efficiency
    n = model.photon_number(field.signal_power_W, field.wavelength_m, det.rbw_Hz, efficiency)
    sql = model.sql_displacement(field.wavelength_m, n)
    sql_rt = sql / math.sqrt(det.rbw_Hz)
    return SqlComparison(n, sql, sql_rt, d_min_per_rtHz_m / sql_rt)


# -- report ------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = "1.0"


@dataclass(frozen=True)
class CalibrationReport:
    displacement_per_volt_m: float
    displacement_per_volt_stderr_m: float
    d_min_m: float
    d_min_stderr_m: float
    d_min_per_rtHz_m: float
    photon_number_N: float
    sql_m: float
    sql_per_rtHz_m: float
    sql_ratio: float
    rbw_Hz: float
    linearity_exponent_fundamental: float
    linearity_exponent_fundamental_stderr: float
    quadratic_exponent_second: float
    quadratic_exponent_second_stderr: float
    ratio_slope_per_V: float
    ratio_slope_stderr_per_V: float
    ratio_intercept: float
    ratio_intercept_stderr: float
    ratio_fit_reduced_chi_sq: float
    intercept_consistent: bool
    saturated: bool

    def to_dict(self) -> dict[str, Any]:
        """Flat mapping whose numeric keys all carry a unit suffix."""
        return {
            "displacement_per_volt_m_per_V": self.displacement_per_volt_m,
            "displacement_per_volt_stderr_m_per_V": self.displacement_per_volt_stderr_m,
            "d_min_m": self.d_min_m,
            "d_min_stderr_m": self.d_min_stderr_m,
            "d_min_per_rtHz_m_per_rtHz": self.d_min_per_rtHz_m,
            "photon_number_count": self.photon_number_N,
            "sql_m": self.sql_m,
            "sql_per_rtHz_m_per_rtHz": self.sql_per_rtHz_m,
            "sql_ratio_dimless": self.sql_ratio,
            "rbw_Hz": self.rbw_Hz,
            "linearity_exponent_fundamental_dimless": self.linearity_exponent_fundamental,
            "linearity_exponent_fundamental_stderr_dimless": self.linearity_exponent_fundamental_stderr,
            "quadratic_exponent_second_dimless": self.quadratic_exponent_second,
            "quadratic_exponent_second_stderr_dimless": self.quadratic_exponent_second_stderr,
            "ratio_slope_per_V": self.ratio_slope_per_V,
            "ratio_slope_stderr_per_V": self.ratio_slope_stderr_per_V,
            "ratio_intercept_dimless": self.ratio_intercept,
            "ratio_intercept_stderr_dimless": self.ratio_intercept_stderr,
            "ratio_fit_reduced_chi_sq_dimless": self.ratio_fit_reduced_chi_sq,
            "intercept_consistent": self.intercept_consistent,
            "saturated": self.saturated,
        }


def build_report(
    calibration_sweep: SweepDataset,
    field: OpticalField,
    det: DetectionChain,
    *,
    sensitivity_sweep: SweepDataset | None = None,
    snr_threshold: float = DEFAULT_SNR_THRESHOLD,
    efficiency: float | None = None,
) -> tuple[CalibrationReport, DisplacementCalibration, Sensitivity]:
    """Run the full analysis chain on measured sweeps.

    Without a dedicated sensitivity sweep the crossing is extrapolated from
    the calibration sweep's fundamental.
    """
    cal = calibrate_displacement(calibration_sweep, field, snr_threshold=snr_threshold)
    exps = growth_exponents(calibration_sweep, snr_threshold=snr_threshold)
    rbw = calibration_sweep.fundamental[0].rbw_Hz
    sens = sensitivity_crossing(
        sensitivity_sweep or calibration_sweep,
        cal.displacement_per_volt_m,
        rbw,
        snr_threshold=snr_threshold,
        displacement_per_volt_stderr_m=cal.displacement_per_volt_stderr_m,
    )
    sql = compare_sql(sens.d_min_per_rtHz_m, field, det, efficiency)
    report = CalibrationReport(
        displacement_per_volt_m=cal.displacement_per_volt_m,
        displacement_per_volt_stderr_m=cal.displacement_per_volt_stderr_m,
        d_min_m=sens.d_min_m,
        d_min_stderr_m=sens.d_min_stderr_m,
        d_min_per_rtHz_m=sens.d_min_per_rtHz_m,
        photon_number_N=sql.photon_number,
        sql_m=sql.sql_m,
        sql_per_rtHz_m=sql.sql_per_rtHz_m,
        sql_ratio=sql.ratio,
        rbw_Hz=rbw,
        linearity_exponent_fundamental=exps.fundamental,
        linearity_exponent_fundamental_stderr=exps.fundamental_stderr,
        quadratic_exponent_second=exps.second,
        quadratic_exponent_second_stderr=exps.second_stderr,
        ratio_slope_per_V=cal.fit.slope,
        ratio_slope_stderr_per_V=cal.fit.slope_stderr,
        ratio_intercept=cal.fit.intercept,
        ratio_intercept_stderr=cal.fit.intercept_stderr,
        ratio_fit_reduced_chi_sq=cal.fit.reduced_chi_sq,
        intercept_consistent=cal.intercept_consistent,
        saturated=exps.saturated,
    )
    return report, cal, sens
