"""Spectrum-analyzer and lock-in emulation on photocurrent traces.

Filtering is done in the frequency domain. A trace is transformed once and
the bins inside the passband of a Gaussian resolution filter (truncated at
+/- 6 sigma) are shifted to baseband and inverse transformed on a short
grid. This is circular filtering, so output samples within six
impulse-response widths of either end are discarded.

Detected power follows spectrum-analyzer calibration: a sinusoid of
amplitude ``a`` at the center frequency reads ``a**2 / 2`` and white noise
of one-sided density ``G`` reads ``G * ENBW``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Literal

import numpy as np
import scipy.fft as sfft
from scipy.signal import lfilter

from .constants import GAUSSIAN_ENBW_PER_RBW
from .errors import DomainError, PlacementError, PrecisionError
from .synth import PhotocurrentTrace

TRUNCATION_SIGMAS = 6.0
DEFAULT_FLOOR_OFFSET_RBW = 25.0
MIN_FLOOR_SEPARATION_RBW = 20.0
FLOOR_OFFSET_SPACING_RBW = 4.0
DEFAULT_FLOOR_OFFSETS = 256
MIN_DURATION_RBW = 5.0

ENBW_PER_RBW = GAUSSIAN_ENBW_PER_RBW


class StationarityWarning(UserWarning):
    pass


def gaussian_sigma_hz(rbw_Hz: float) -> float:
    """Std of the amplitude response exp(-2 ln2 (f/rbw)^2)."""
    return rbw_Hz / (2.0 * math.sqrt(math.log(2.0)))


def enbw(rbw_Hz: float) -> float:
    return ENBW_PER_RBW * rbw_Hz


def gaussian_response(delta_f: np.ndarray, rbw_Hz: float) -> np.ndarray:
    """Amplitude response; the power response is -3 dB at delta_f = rbw / 2."""
    return np.exp(-2.0 * math.log(2.0) * (np.asarray(delta_f) / rbw_Hz) ** 2)


@dataclass(frozen=True)
class ZeroSpanSettings:
    center_freq_Hz: float
    rbw_Hz: float = 50.0
    vbw_Hz: float = 5.0
    detector: Literal["sample", "average-power"] = "sample"

    def __post_init__(self):
        if not self.rbw_Hz > 0:
            raise DomainError("rbw_Hz must be positive")
        if not 0 < self.vbw_Hz <= self.rbw_Hz:
            raise DomainError("vbw_Hz must lie in (0, rbw_Hz]")
        if self.detector not in ("sample", "average-power"):
            raise DomainError(f"unknown detector {self.detector!r}")
        if self.center_freq_Hz < 0:
            raise DomainError("center_freq_Hz must be non-negative")

    @property
    def enbw_Hz(self) -> float:
        return enbw(self.rbw_Hz)

    def at(self, center_freq_Hz: float) -> "ZeroSpanSettings":
        return replace(self, center_freq_Hz=center_freq_Hz)


class _Spectrum:
    """One-sided DFT of a trace, shared by every band extracted from it."""

    def __init__(self, trace: PhotocurrentTrace):
        self.n = trace.samples.size
        self.fs = trace.sample_rate_Hz
        self.df = self.fs / self.n
        self.duration = self.n / self.fs
        self.X = sfft.rfft(trace.samples)

    def band(
        self,
        center_Hz: float,
        half_width_Hz: float,
        response: Callable[[np.ndarray], np.ndarray],
        min_rate_Hz: float = 0.0,
    ) -> tuple[np.ndarray, float]:
        """Complex baseband series of the positive-frequency band around center."""
        k_lo = math.ceil((center_Hz - half_width_Hz) / self.df)
        k_hi = math.floor((center_Hz + half_width_Hz) / self.df)
        if k_lo < 1 or k_hi >= self.n // 2:
            raise DomainError(
                f"band {center_Hz:g} +/- {half_width_Hz:g} Hz leaves (0, Nyquist) "
                f"for sample rate {self.fs:g} Hz"
            )
        k = np.arange(k_lo, k_hi + 1)
        values = self.X[k_lo : k_hi + 1] * response(k * self.df - center_Hz)
        size = max(2 * k.size, int(math.ceil(min_rate_Hz * self.duration)), 16)
        size = sfft.next_fast_len(size)
        k0 = int(round(center_Hz / self.df))
        buf = np.zeros(size, dtype=complex)
        np.add.at(buf, (k - k0) % size, values)
        z = sfft.ifft(buf) * (size / self.n)
        return z, size / self.duration

    def lowpass(self, cutoff_Hz: float, half_width_Hz: float, response) -> tuple[np.ndarray, float]:
        k_hi = math.floor(half_width_Hz / self.df)
        if k_hi >= self.n // 2:
            raise DomainError("low-pass band exceeds Nyquist")
        k = np.arange(k_hi + 1)
        values = self.X[: k_hi + 1] * response(k * self.df)
        size = sfft.next_fast_len(max(4 * (k_hi + 1), 16))
        size += size % 2
        buf = np.zeros(size // 2 + 1, dtype=complex)
        buf[: k_hi + 1] = values
        return sfft.irfft(buf, size) * (size / self.n), size / self.duration


def _edge_samples(rbw_Hz: float, rate_Hz: float) -> int:
    sigma_t = 1.0 / (2.0 * math.pi * gaussian_sigma_hz(rbw_Hz))
    return int(math.ceil(TRUNCATION_SIGMAS * sigma_t * rate_Hz))


def _check_duration(duration_s: float, rbw_Hz: float) -> None:
    if duration_s * rbw_Hz < MIN_DURATION_RBW:
        raise PrecisionError(
            f"trace of {duration_s:g} s is shorter than {MIN_DURATION_RBW:g}/rbw "
            f"= {MIN_DURATION_RBW / rbw_Hz:g} s"
        )


@dataclass(frozen=True, eq=False)
class ZeroSpanTrace:
    """Detected power versus time at a fixed center frequency."""

    power: np.ndarray
    sample_rate_Hz: float
    settings: ZeroSpanSettings
    start_time_s: float
    raw_mean: float
    span_s: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.power))

    def times(self) -> np.ndarray:
        return self.start_time_s + np.arange(self.power.size) / self.sample_rate_Hz

    def mean_stderr(self, floor: float | None = None) -> float:
        """Std error of the time-averaged power for a tone in white noise.

        ``floor`` is the noise contribution; by default the reading is treated
        as noise only.
        """
        total = self.raw_mean
        floor = total if floor is None else min(floor, total)
        sigma_f = gaussian_sigma_hz(self.settings.rbw_Hz)
        lin = 1.0 / (math.sqrt(math.pi) * sigma_f)
        quad = 1.0 / (math.sqrt(2.0 * math.pi) * sigma_f)
        var = (2.0 * (total - floor) * floor * lin + floor * floor * quad) / self.span_s
        return math.sqrt(max(var, 0.0))


def _zero_span(spec: _Spectrum, settings: ZeroSpanSettings) -> ZeroSpanTrace:
    _check_duration(spec.duration, settings.rbw_Hz)
    if settings.center_freq_Hz >= spec.fs / 2:
        raise DomainError(
            f"center frequency {settings.center_freq_Hz:g} Hz above Nyquist {spec.fs / 2:g} Hz"
        )
    half = TRUNCATION_SIGMAS * gaussian_sigma_hz(settings.rbw_Hz)
    z, rate = spec.band(
        settings.center_freq_Hz,
        half,
        lambda df: gaussian_response(df, settings.rbw_Hz),
        min_rate_Hz=4.0 * settings.vbw_Hz,
    )
    edge = _edge_samples(settings.rbw_Hz, rate)
    if z.size - 2 * edge < 4:
        raise PrecisionError("trace too short to outlast the resolution filter response")
    detected = 2.0 * np.abs(z[edge : z.size - edge]) ** 2
    raw_mean = float(np.mean(detected))
    if settings.detector == "sample":
        alpha = 1.0 - math.exp(-2.0 * math.pi * settings.vbw_Hz / rate)
        # Start the video filter in steady state at the mean detected power.
        video, _ = lfilter([alpha], [1.0, alpha - 1.0], detected, zi=[(1.0 - alpha) * raw_mean])
    else:
        width = max(1, int(round(rate / settings.vbw_Hz)))
        width = min(width, detected.size)
        video = np.convolve(detected, np.full(width, 1.0 / width), mode="valid")
    return ZeroSpanTrace(
        power=video,
        sample_rate_Hz=rate,
        settings=settings,
        start_time_s=edge / rate,
        raw_mean=raw_mean,
        span_s=detected.size / rate,
    )


def zero_span_power(trace: PhotocurrentTrace, settings: ZeroSpanSettings) -> ZeroSpanTrace:
    """Zero-span detection: Gaussian RBW band at the center, |.|^2, video filter."""
    return _zero_span(_Spectrum(trace), settings)


@dataclass(frozen=True, eq=False)
class Demodulation:
    """Dual-phase lock-in output. ``i`` is in phase with sin(2 pi f t)."""

    i: np.ndarray
    q: np.ndarray
    sample_rate_Hz: float
    enbw_Hz: float
    start_time_s: float

    @property
    def amplitude(self) -> float:
        return float(np.hypot(np.mean(self.i), np.mean(self.q)))

    @property
    def phase_rad(self) -> float:
        return float(math.atan2(np.mean(self.q), np.mean(self.i)))


def demodulate(trace: PhotocurrentTrace, freq_Hz: float, lp_cutoff_Hz: float) -> Demodulation:
    """Mix with sin/cos at ``freq_Hz`` and low-pass both channels.

    The low-pass is Gaussian with -3 dB point at ``lp_cutoff_Hz``. For an input
    ``a sin(2 pi f t + theta)`` the averaged output has magnitude ``a / 2`` and
    phase ``theta``.
    """
    fs = trace.sample_rate_Hz
    if not 0 < freq_Hz < fs / 2:
        raise DomainError(f"demodulation frequency {freq_Hz:g} Hz outside (0, Nyquist)")
    if not 0 < lp_cutoff_Hz < freq_Hz / 2:
        raise DomainError(
            f"low-pass cutoff {lp_cutoff_Hz:g} Hz must be below half the reference "
            f"frequency to reject the 2f mixing product"
        )
    width = 2.0 * lp_cutoff_Hz
    spec = _Spectrum(trace)
    _check_duration(spec.duration, width)
    z, rate = spec.band(
        freq_Hz,
        TRUNCATION_SIGMAS * gaussian_sigma_hz(width),
        lambda df: gaussian_response(df, width),
    )
    edge = _edge_samples(width, rate)
    z = z[edge : z.size - edge]
    return Demodulation(
        i=-z.imag.copy(),
        q=z.real.copy(),
        sample_rate_Hz=rate,
        enbw_Hz=enbw(width),
        start_time_s=edge / rate,
    )


@dataclass(frozen=True, eq=False)
class LowpassSeries:
    values: np.ndarray
    sample_rate_Hz: float
    start_time_s: float


def lowpass(trace: PhotocurrentTrace, cutoff_Hz: float) -> LowpassSeries:
    """Gaussian low-pass (-3 dB at ``cutoff_Hz``) of a trace, decimated."""
    width = 2.0 * cutoff_Hz
    spec = _Spectrum(trace)
    values, rate = spec.lowpass(
        cutoff_Hz,
        TRUNCATION_SIGMAS * gaussian_sigma_hz(width),
        lambda f: gaussian_response(f, width),
    )
    edge = _edge_samples(width, rate)
    return LowpassSeries(values[edge : values.size - edge].copy(), rate, edge / rate)


@dataclass(frozen=True)
class FloorReading:
    power: float
    stderr: float
    stationary: bool


def _check_placement(offset_Hz: float, mod_freq_Hz: float | None, rbw_Hz: float) -> None:
    if mod_freq_Hz is None:
        return
    nearest = round(offset_Hz / mod_freq_Hz) * mod_freq_Hz
    if abs(offset_Hz - nearest) < MIN_FLOOR_SEPARATION_RBW * rbw_Hz:
        raise PlacementError(
            f"noise-floor frequency {offset_Hz:g} Hz lies within "
            f"{MIN_FLOOR_SEPARATION_RBW:g} RBW of the harmonic at {nearest:g} Hz"
        )


def _floor_reading(spec: _Spectrum, settings: ZeroSpanSettings) -> FloorReading:
    zs = _zero_span(spec, settings)
    half = zs.power.size // 2
    first, second = float(np.mean(zs.power[:half])), float(np.mean(zs.power[half:]))
    stderr = zs.mean_stderr()
    stationary = abs(first - second) <= 3.0 * 2.0 * stderr
    return FloorReading(zs.raw_mean, stderr, stationary)


def noise_floor(
    trace: PhotocurrentTrace,
    offset_freq_Hz: float,
    settings: ZeroSpanSettings,
    mod_freq_Hz: float | None = None,
) -> FloorReading:
    """Mean zero-span power at ``offset_freq_Hz``, away from every harmonic.

    The two halves of the record are compared; a difference beyond 3 sigma
    marks the reading non-stationary and raises a warning.
    """
    if mod_freq_Hz is None:
        mod_freq_Hz = trace.acquisition("mod_freq_Hz")
    _check_placement(offset_freq_Hz, mod_freq_Hz, settings.rbw_Hz)
    reading = _floor_reading(_Spectrum(trace), settings.at(offset_freq_Hz))
    if not reading.stationary:
        warnings.warn(
            f"noise floor at {offset_freq_Hz:g} Hz drifts between record halves",
            StationarityWarning,
            stacklevel=2,
        )
    return reading


def floor_offsets(center_Hz: float, mod_freq_Hz: float, rbw_Hz: float, count: int, nyquist: float) -> list[float]:
    """Frequencies on both sides of a harmonic for averaging the noise floor."""
    half = TRUNCATION_SIGMAS * gaussian_sigma_hz(rbw_Hz)
    out = []
    step = 0
    while len(out) < count:
        distance = (DEFAULT_FLOOR_OFFSET_RBW + FLOOR_OFFSET_SPACING_RBW * step) * rbw_Hz
        if distance > mod_freq_Hz / 2:
            break
        for freq in (center_Hz + distance, center_Hz - distance):
            if len(out) == count or not half < freq < nyquist - half:
                continue
            nearest = round(freq / mod_freq_Hz) * mod_freq_Hz
            if abs(freq - nearest) >= MIN_FLOOR_SEPARATION_RBW * rbw_Hz:
                out.append(freq)
        step += 1
    return out


@dataclass(frozen=True)
class HarmonicMeasurement:
    order: int
    drive_voltage_V: float
    lock_phase_rad: float
    signal_power: float
    noise_floor_power: float
    snr_amplitude: float
    rbw_Hz: float
    signal_power_stderr: float = 0.0
    noise_floor_stderr: float = 0.0

    def __post_init__(self):
        if self.order < 1:
            raise DomainError("harmonic order must be >= 1")
        if not self.noise_floor_power > 0:
            raise DomainError("noise_floor_power must be positive")
        if self.snr_amplitude < 0:
            raise DomainError("snr_amplitude must be non-negative")

    def _power_ratio_err(self) -> float:
        s, f = self.signal_power, self.noise_floor_power
        return math.hypot(self.signal_power_stderr / f, s * self.noise_floor_stderr / f**2)

    @property
    def snr_excess(self) -> float:
        """Background-subtracted amplitude SNR, sqrt(S/F - 1) clipped at zero."""
        return math.sqrt(max(self.signal_power / self.noise_floor_power - 1.0, 0.0))

    @property
    def snr_excess_stderr(self) -> float:
        delta = self._power_ratio_err()
        return delta / (2.0 * max(self.snr_excess, math.sqrt(delta))) if delta > 0 else 0.0

    @property
    def snr_amplitude_stderr(self) -> float:
        delta = self._power_ratio_err()
        return delta / (2.0 * self.snr_amplitude) if self.snr_amplitude > 0 else 0.0


def extract_harmonic_snr(
    trace: PhotocurrentTrace,
    mod_freq_Hz: float,
    order: int,
    settings: ZeroSpanSettings,
    *,
    n_floor_offsets: int = DEFAULT_FLOOR_OFFSETS,
    drive_voltage_V: float | None = None,
    lock_phase_rad: float | None = None,
) -> HarmonicMeasurement:
    """Amplitude SNR of the ``order``-th modulation harmonic.

    The floor is the mean of zero-span readings at ``n_floor_offsets``
    frequencies spaced around the harmonic, starting 25 RBW away. With no
    signal the SNR is close to 1.
    """
    if order < 1:
        raise DomainError("harmonic order must be >= 1")
    fs = trace.sample_rate_Hz
    center = order * mod_freq_Hz
    if center >= fs / 2:
        raise DomainError(f"harmonic {order} at {center:g} Hz is above Nyquist")
    _check_duration(trace.duration_s, settings.rbw_Hz)
    spec = _Spectrum(trace)
    signal = _zero_span(spec, settings.at(center))
    offsets = floor_offsets(center, mod_freq_Hz, settings.rbw_Hz, max(n_floor_offsets, 1), fs / 2)
    if not offsets:
        raise PlacementError("no valid noise-floor offsets around the harmonic")
    readings = np.array([_zero_span(spec, settings.at(f)).raw_mean for f in offsets])
    floor = float(np.mean(readings))
    if readings.size > 1:
        floor_err = float(np.std(readings, ddof=1) / math.sqrt(readings.size))
    else:
        floor_err = signal.mean_stderr(floor)
    power = signal.mean
    if drive_voltage_V is None:
        drive_voltage_V = float(trace.acquisition("drive_voltage_V", float("nan")))
    if lock_phase_rad is None:
        lock_phase_rad = float(trace.acquisition("lock_phase_rad", float("nan")))
    return HarmonicMeasurement(
        order=order,
        drive_voltage_V=drive_voltage_V,
        lock_phase_rad=lock_phase_rad,
        signal_power=power,
        noise_floor_power=floor,
        snr_amplitude=math.sqrt(power / floor),
        rbw_Hz=settings.rbw_Hz,
        signal_power_stderr=signal.mean_stderr(floor),
        noise_floor_stderr=floor_err,
    )
