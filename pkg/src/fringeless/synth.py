"""Seeded synthesis of shot-noise-limited difference photocurrents."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Any, Mapping

import numpy as np

from . import model
from .constants import GAUSSIAN_ENBW_PER_RBW
from .errors import ConfigurationError, ProvenanceError
from .model import DetectionChain, LockPoint, Modulation, OpticalField, QuadratureNoise

CHUNK_SAMPLES = 1 << 20
# Lock jitter lives below mod_freq / JITTER_BAND_DIVISOR.
JITTER_BAND_DIVISOR = 100.0
LF_SPLIT_HZ = 10e3


@dataclass(frozen=True)
class SynthesisPlan:
    field: OpticalField = dc_field(default_factory=OpticalField)
    det: DetectionChain = dc_field(default_factory=DetectionChain)
    mod: Modulation = dc_field(default_factory=Modulation)
    lock: LockPoint = dc_field(default_factory=LockPoint)
    noise: QuadratureNoise = dc_field(default_factory=QuadratureNoise)
    sample_rate_Hz: float = 16e6
    duration_s: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.sample_rate_Hz < 8 * self.mod.frequency_Hz:
            raise ConfigurationError(
                f"sample_rate_Hz={self.sample_rate_Hz} must be at least 8 x mod frequency "
                f"({8 * self.mod.frequency_Hz})"
            )
        if self.duration_s * self.det.rbw_Hz < 5:
            raise ConfigurationError(
                f"duration_s x rbw_Hz = {self.duration_s * self.det.rbw_Hz:g} < 5; "
                "trace too short for the resolution filter"
            )
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigurationError("rng_seed must be an unsigned 64-bit integer")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_Hz))

    @property
    def modulation_depth_rad(self) -> float:
        return model.modulation_depth(self.mod, self.field)

    def noise_sample_std(self) -> float:
        """Per-sample std of the white shot noise.

        Chosen so that a zero-span reading at the reference RBW sees a noise
        floor of ``dS**2 / 2``, the power of a sinusoid with amplitude ``dS``.
        """
        if self.noise.is_noiseless:
            return 0.0
        ds = model.homodyne_noise_std(self.field, self.det, self.lock.mean_phase_rad, self.noise)
        enbw = GAUSSIAN_ENBW_PER_RBW * self.det.rbw_Hz
        return ds * math.sqrt(self.sample_rate_Hz / (4.0 * enbw))

    def with_(self, **changes: Any) -> "SynthesisPlan":
        """Copy with top-level or nested changes, e.g. ``drive_voltage_V=3``."""
        groups = {
            "field": OpticalField,
            "det": DetectionChain,
            "mod": Modulation,
            "lock": LockPoint,
            "noise": QuadratureNoise,
        }
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, value in changes.items():
            if key in groups or key in ("sample_rate_Hz", "duration_s", "rng_seed"):
                top[key] = value
                continue
            owner = next(
                (g for g, cls in groups.items() if key in cls.__dataclass_fields__), None
            )
            if owner is None:
                raise ConfigurationError(f"unknown plan parameter {key!r}")
            nested.setdefault(owner, {})[key] = value
        for owner, kw in nested.items():
            top[owner] = _replace(getattr(self, owner), **kw)
        return _replace(self, **top)


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


@dataclass(frozen=True, eq=False)
class PhotocurrentTrace:
    samples: np.ndarray
    sample_rate_Hz: float
    start_time_s: float = 0.0
    plan: SynthesisPlan | None = None
    metadata: Mapping[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("trace contains non-finite samples")
        if not self.sample_rate_Hz > 0:
            raise ValueError("sample_rate_Hz must be positive")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_Hz

    def times(self) -> np.ndarray:
        return self.start_time_s + np.arange(self.samples.size) / self.sample_rate_Hz

    def acquisition(self, key: str, default=None):
        """Look up an acquisition parameter from the plan or ingested header."""
        if key in self.metadata:
            return self.metadata[key]
        if self.plan is not None:
            lookup = {
                "lock_phase_rad": self.plan.lock.mean_phase_rad,
                "drive_voltage_V": self.plan.mod.drive_voltage_V,
                "mod_freq_Hz": self.plan.mod.frequency_Hz,
            }
            if key in lookup:
                return lookup[key]
        return default


def _lock_jitter(plan: SynthesisPlan, rng: np.random.Generator) -> tuple[np.ndarray, float] | None:
    """Band-limited jitter on a coarse grid, returned with the grid rate."""
    rms = plan.lock.residual_jitter_rad
    if rms == 0:
        return None
    cutoff = plan.mod.frequency_Hz / JITTER_BAND_DIVISOR
    # Fine enough that linear interpolation keeps the RMS within 0.2%.
    rate = 32.0 * cutoff
    n = int(math.ceil(plan.duration_s * rate)) + 2
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[freqs >= cutoff] = 0.0
    spec[0] = 0.0
    coarse = np.fft.irfft(spec, n)
    coarse *= rms / np.sqrt(np.mean(coarse**2))
    return coarse, rate


def synthesize_trace(plan: SynthesisPlan) -> PhotocurrentTrace:
    """Difference photocurrent: homodyne mean with piezo modulation, lock jitter and shot noise."""
    jitter_seq, noise_seq = np.random.SeedSequence(plan.rng_seed).spawn(2)
    jitter = _lock_jitter(plan, np.random.Generator(np.random.PCG64(jitter_seq)))
    noise_rng = np.random.Generator(np.random.PCG64(noise_seq))

    n = plan.n_samples
    fs = plan.sample_rate_Hz
    scale = float(model.homodyne_mean(plan.field, plan.det, 0.0))
    knd = plan.modulation_depth_rad
    phi0 = plan.lock.mean_phase_rad
    sigma = plan.noise_sample_std()
    cycles_per_sample = plan.mod.frequency_Hz / fs

    out = np.empty(n)
    for start in range(0, n, CHUNK_SAMPLES):
        stop = min(start + CHUNK_SAMPLES, n)
        idx = np.arange(start, stop, dtype=float)
        phase = phi0
        if jitter is not None:
            coarse, rate = jitter
            phase = phi0 + np.interp(idx * (rate / fs), np.arange(coarse.size), coarse)
        if knd != 0:
            cyc = np.mod(idx * cycles_per_sample, 1.0)
            phase = phase + knd * np.sin(2.0 * math.pi * cyc)
        chunk = scale * np.cos(phase) if np.ndim(phase) else np.full(stop - start, scale * math.cos(phase))
        if sigma:
            chunk += sigma * noise_rng.standard_normal(stop - start)
        out[start:stop] = chunk
    return PhotocurrentTrace(out, fs, 0.0, plan=plan, metadata={"source": "synthesized"})


def lock_error_signal(plan: SynthesisPlan, trace: PhotocurrentTrace) -> np.ndarray:
    """Emulated lock error signal, for verifying the lock point only.

    Near the phase quadrature this is the low-frequency part of the
    difference current; near the amplitude quadrature it is the in-phase
    demodulation at the drive frequency.
    """
    from . import dsp

    if trace.plan is not plan and trace.plan != plan:
        raise ProvenanceError("trace was not generated from this plan")
    phi0 = plan.lock.mean_phase_rad
    if abs(math.cos(phi0)) < abs(math.sin(phi0)):
        return dsp.lowpass(trace, LF_SPLIT_HZ).values
    cutoff = min(LF_SPLIT_HZ, plan.mod.frequency_Hz / 4)
    return dsp.demodulate(trace, plan.mod.frequency_Hz, cutoff).i
