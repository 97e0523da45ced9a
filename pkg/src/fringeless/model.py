"""Analytic model of a phase-modulated homodyne interferometer.

Everything here is a pure function of its arguments. Detected quantities are
carried in simulation units where the single-photon field amplitude and the
electron charge are 1, so the mean homodyne signal is ``2 * eta * A_lo * A_sig``
and every reported figure of merit is an amplitude signal-to-noise ratio.

Field amplitudes are square roots of photon numbers counted over the
integration window of the resolution filter, ``0.44 / rbw``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.optimize import brentq

from .constants import (
    GAUSSIAN_TIME_BANDWIDTH,
    PLANCK_J_S,
    SHOT_NOISE_VARIANCE,
    SPEED_OF_LIGHT_M_S,
)
from .errors import DomainError, RegimeError

ArrayLike = Union[float, np.ndarray]

SMALL_MODULATION_LIMIT_RAD = 0.5
BESSEL_MAX_ARG = 20.0
# Ratios below this are inverted with the small-angle formula; the neglected
# correction (4 r)^2 / 24 stays under 1e-6 relative.
LINEAR_INVERSION_MAX_RATIO = 1e-3
MAX_INVERTIBLE_RATIO = 0.125


class HomodyneApproximationWarning(UserWarning):
    """The local oscillator is not much stronger than the signal."""


@dataclass(frozen=True)
class OpticalField:
    wavelength_m: float = 795e-9
    signal_power_W: float = 115e-6
    lo_power_W: float = 1.5e-3
    refractive_index: float = 1.0

    def __post_init__(self):
        if not self.wavelength_m > 0:
            raise DomainError(f"wavelength_m must be positive, got {self.wavelength_m}")
        if self.signal_power_W < 0 or self.lo_power_W < 0:
            raise DomainError("optical powers must be non-negative")
        if not self.refractive_index >= 1:
            raise DomainError(f"refractive_index must be >= 1, got {self.refractive_index}")

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength_m

    @property
    def photon_energy_J(self) -> float:
        return PLANCK_J_S * SPEED_OF_LIGHT_M_S / self.wavelength_m

    @property
    def homodyne_approximation_ok(self) -> bool:
        """The variance formula assumes A_lo >> A_sig; flagged below a 10x power ratio."""
        return self.lo_power_W >= 10.0 * self.signal_power_W


@dataclass(frozen=True)
class DetectionChain:
    quantum_efficiency: float = 0.667
    overlap: float = 1.0
    rbw_Hz: float = 50.0
    vbw_Hz: float = 5.0

    def __post_init__(self):
        if not 0 <= self.quantum_efficiency <= 1:
            raise DomainError("quantum_efficiency must lie in [0, 1]")
        if not 0 <= self.overlap <= 1:
            raise DomainError("overlap must lie in [0, 1]")
        if not self.rbw_Hz > 0:
            raise DomainError(f"rbw_Hz must be positive, got {self.rbw_Hz}")
        if not self.vbw_Hz > 0:
            raise DomainError(f"vbw_Hz must be positive, got {self.vbw_Hz}")
        if self.vbw_Hz > self.rbw_Hz:
            raise DomainError("vbw_Hz must not exceed rbw_Hz")

    @property
    def gain(self) -> float:
        """eta = R * gamma with e / (hbar omega) folded into simulation units."""
        return self.quantum_efficiency * self.overlap

    @property
    def detection_efficiency(self) -> float:
        # Homodyne efficiency: detector efficiency times fringe visibility squared.
        return self.quantum_efficiency * self.overlap**2

    @property
    def integration_time_s(self) -> float:
        return GAUSSIAN_TIME_BANDWIDTH / self.rbw_Hz


@dataclass(frozen=True)
class Modulation:
    frequency_Hz: float = 2e6
    displacement_per_volt_m: float = 0.55e-10
    drive_voltage_V: float = 10.0

    def __post_init__(self):
        if not self.frequency_Hz > 0:
            raise DomainError("frequency_Hz must be positive")
        if self.drive_voltage_V < 0:
            raise DomainError("drive_voltage_V must be non-negative")
        if self.displacement_per_volt_m < 0:
            raise DomainError("displacement_per_volt_m must be non-negative")

    @property
    def displacement_m(self) -> float:
        return self.displacement_per_volt_m * self.drive_voltage_V


@dataclass(frozen=True)
class LockPoint:
    mean_phase_rad: float = math.pi / 2
    residual_jitter_rad: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.mean_phase_rad < 2 * math.pi:
            raise DomainError("mean_phase_rad must lie in [0, 2 pi)")
        if self.residual_jitter_rad < 0:
            raise DomainError("residual_jitter_rad must be non-negative")


PHASE_QUADRATURE = math.pi / 2
AMPLITUDE_QUADRATURE = 0.0


@dataclass(frozen=True)
class QuadratureNoise:
    """Amplitude variance and photon-number-scaled phase variance of the signal.

    Both equal 1/4 at the shot-noise limit. The all-zero instance describes a
    noiseless simulation and is the only value allowed below the quantum floor.
    """

    amp_var: float = SHOT_NOISE_VARIANCE
    phase_var_scaled: float = SHOT_NOISE_VARIANCE

    def __post_init__(self):
        if self.amp_var == 0 and self.phase_var_scaled == 0:
            return
        floor = SHOT_NOISE_VARIANCE * (1 - 1e-12)
        if self.amp_var < floor or self.phase_var_scaled < floor:
            raise DomainError(
                "quadrature variances below 1/4 require nonclassical light"
            )

    @classmethod
    def noiseless(cls) -> "QuadratureNoise":
        return cls(0.0, 0.0)

    @property
    def is_noiseless(self) -> bool:
        return self.amp_var == 0 and self.phase_var_scaled == 0

    @property
    def shot_noise_limited(self) -> bool:
        return self.amp_var == SHOT_NOISE_VARIANCE and self.phase_var_scaled == SHOT_NOISE_VARIANCE


# -- Bessel functions ---------------------------------------------------------


def _bessel_series(order: int, x: np.ndarray) -> np.ndarray:
    half = 0.5 * x
    term = half**order / math.factorial(order)
    total = term.copy()
    q = -half * half
    m = 0
    while True:
        m += 1
        term = term * q / (m * (m + order))
        total += term
        scale = np.abs(total)
        if np.all(np.abs(term) <= 1e-16 * np.where(scale > 0, scale, 1.0)):
            return total
        if m > 200:
            return total


def _bessel_miller(order: int, x: float) -> float:
    # Backward recurrence normalised by J0 + 2 sum J_2k = 1.
    start = 2 * ((max(order, int(x)) + 15 + int(math.sqrt(40 * max(order, x, 1.0)))) // 2)
    j_next, j_cur = 0.0, 1e-300
    total = 0.0
    wanted = 0.0
    for k in range(start, 0, -1):
        j_prev = 2 * k / x * j_cur - j_next
        j_next, j_cur = j_cur, j_prev
        if abs(j_cur) > 1e250:
            j_cur *= 1e-250
            j_next *= 1e-250
            total *= 1e-250
            wanted *= 1e-250
        if k - 1 == order:
            wanted = j_cur
        if (k - 1) % 2 == 0 and k - 1 > 0:
            total += 2 * j_cur
    total += j_cur
    return wanted / total


def bessel_j(order: int, x: ArrayLike) -> ArrayLike:
    """Bessel function of the first kind J_order(x) for integer order >= 0.

    Uses the ascending power series for |x| <= 8 and Miller's backward
    recurrence beyond, up to |x| = 20.
    """
    if int(order) != order or order < 0:
        raise DomainError(f"order must be a non-negative integer, got {order}")
    order = int(order)
    arr = np.asarray(x, dtype=float)
    if np.any(np.abs(arr) > BESSEL_MAX_ARG):
        raise DomainError(f"|x| must not exceed {BESSEL_MAX_ARG}")
    flat = np.atleast_1d(arr).ravel()
    out = np.empty_like(flat)
    small = np.abs(flat) <= 8.0
    if np.any(small):
        out[small] = _bessel_series(order, flat[small])
    for i in np.flatnonzero(~small):
        xi = flat[i]
        value = _bessel_miller(order, abs(xi))
        out[i] = -value if (xi < 0 and order % 2) else value
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


# -- signal and noise --------------------------------------------------------


def photon_number(
    power_W: float, wavelength_m: float, rbw_Hz: float, efficiency: float = 1.0
) -> float:
    """Detected photons in the Gaussian-filter integration time 0.44 / rbw."""
    if power_W < 0 or wavelength_m <= 0 or rbw_Hz <= 0:
        raise DomainError("power must be >= 0, wavelength and rbw > 0")
    if not 0 < efficiency <= 1:
        raise DomainError("efficiency must lie in (0, 1]")
    energy = PLANCK_J_S * SPEED_OF_LIGHT_M_S / wavelength_m
    return efficiency * power_W * (GAUSSIAN_TIME_BANDWIDTH / rbw_Hz) / energy


def field_amplitudes(field: OpticalField, det: DetectionChain) -> tuple[float, float]:
    """(A_lo, A_sig) as square roots of photon numbers per integration window.

    The signal amplitude counts detected, mode-matched photons only.
    """
    n_lo = photon_number(field.lo_power_W, field.wavelength_m, det.rbw_Hz)
    if field.signal_power_W == 0 or det.detection_efficiency == 0:
        n_sig = 0.0
    else:
        n_sig = photon_number(
            field.signal_power_W, field.wavelength_m, det.rbw_Hz, det.detection_efficiency
        )
    return math.sqrt(n_lo), math.sqrt(n_sig)


def effective_photon_number(field: OpticalField, det: DetectionChain) -> float:
    return field_amplitudes(field, det)[1] ** 2


def homodyne_mean(field: OpticalField, det: DetectionChain, phi_rel: ArrayLike) -> ArrayLike:
    a_lo, a_sig = field_amplitudes(field, det)
    return 2.0 * det.gain * a_lo * a_sig * np.cos(phi_rel)


def modulation_depth(mod: Modulation, field: OpticalField) -> float:
    """Peak optical phase excursion k * n * d in radians."""
    return field.wavenumber * field.refractive_index * mod.displacement_m


def in_small_modulation_regime(mod: Modulation, field: OpticalField) -> bool:
    return modulation_depth(mod, field) < SMALL_MODULATION_LIMIT_RAD


def modulation_phase(mod: Modulation, field: OpticalField, t: ArrayLike) -> ArrayLike:
    if np.any(np.asarray(t) < 0):
        raise DomainError("time must be non-negative")
    return modulation_depth(mod, field) * np.sin(2.0 * math.pi * mod.frequency_Hz * np.asarray(t))


def snr_harmonics(
    n_sig_photons: float, knd: float, phi0: float, max_order: int = 2
) -> list[tuple[int, float]]:
    """Signed amplitude SNR of each modulation harmonic.

    Order 0 is ``2 sqrt(N) J0 cos(phi0)``. Higher orders carry ``4 sqrt(N) J_m``
    times ``cos(phi0)`` for even m (on cos(m Omega t)) or ``-sin(phi0)`` for
    odd m (on sin(m Omega t)).
    """
    if n_sig_photons < 0 or knd < 0:
        raise DomainError("photon number and modulation depth must be non-negative")
    if max_order < 2:
        raise DomainError("max_order must be at least 2")
    root_n = math.sqrt(n_sig_photons)
    out = [(0, 2.0 * root_n * bessel_j(0, knd) * math.cos(phi0))]
    for m in range(1, max_order + 1):
        quad = math.cos(phi0) if m % 2 == 0 else -math.sin(phi0)
        out.append((m, 4.0 * root_n * bessel_j(m, knd) * quad))
    return out


def homodyne_noise_std(
    field: OpticalField, det: DetectionChain, phi0: float, noise: QuadratureNoise
) -> float:
    """Standard deviation of the difference photocurrent per integration window."""
    if not field.homodyne_approximation_ok:
        warnings.warn(
            "lo_power_W < 10 x signal_power_W; the homodyne noise formula assumes A_lo >> A_sig",
            HomodyneApproximationWarning,
            stacklevel=2,
        )
    a_lo, _ = field_amplitudes(field, det)
    c, s = math.cos(phi0), math.sin(phi0)
    var = noise.amp_var * c * c + noise.phase_var_scaled * s * s
    return 2.0 * det.gain * a_lo * math.sqrt(var)


# -- calibration ratio ----------------------------------------------------------


def harmonic_ratio(knd: float) -> tuple[float, float]:
    """(J2/J1 exactly, knd/4) for a modulation depth knd > 0."""
    if not knd > 0:
        raise DomainError("the harmonic ratio is undefined at zero modulation")
    return bessel_j(2, knd) / bessel_j(1, knd), knd / 4.0


def _exact_depth(ratio: float) -> float:
    guess = 4.0 * ratio
    return brentq(
        lambda x: bessel_j(2, x) / bessel_j(1, x) - ratio,
        0.5 * guess,
        guess,
        xtol=1e-18,
        rtol=4 * np.finfo(float).eps,
    )


def invert_ratio(measured_ratio: float, field: OpticalField, *, exact: bool | None = None) -> float:
    """Displacement amplitude (m) whose J2/J1 harmonic ratio is ``measured_ratio``.

    Small ratios use ``d = 4 r / (k n)``; larger ones solve J2/J1 = r. Pass
    ``exact`` to force either branch.
    """
    if not 0 < measured_ratio < MAX_INVERTIBLE_RATIO:
        raise RegimeError(
            f"ratio {measured_ratio!r} outside (0, {MAX_INVERTIBLE_RATIO}); "
            "modulation depth must stay below 0.5 rad"
        )
    if exact is None:
        exact = measured_ratio >= LINEAR_INVERSION_MAX_RATIO
    knd = _exact_depth(measured_ratio) if exact else 4.0 * measured_ratio
    return knd / (field.wavenumber * field.refractive_index)


def sql_phase(n_photons: float) -> float:
    """Smallest phase modulation resolvable by homodyne detection, 1 / (2 sqrt N)."""
    if not n_photons > 0:
        raise DomainError("photon number must be positive")
    return 1.0 / (2.0 * math.sqrt(n_photons))


def sql_displacement(wavelength_m: float, n_photons: float) -> float:
    """Standard-quantum-limit displacement amplitude lambda / (4 pi sqrt N)."""
    if not wavelength_m > 0 or not n_photons > 0:
        raise DomainError("wavelength and photon number must be positive")
    return wavelength_m / (4.0 * math.pi * math.sqrt(n_photons))


def classical_noise_corrected_ratio(
    raw_ratio: float, phase_noise_rel_fundamental: float, amp_noise_rel_second: float
) -> float:
    """Recover knd/4 from a harmonic ratio measured above the shot-noise limit.

    The noise factors are standard deviations relative to shot noise: phase
    noise at the modulation frequency and amplitude noise at twice it.
    """
    if not raw_ratio > 0:
        raise DomainError("raw_ratio must be positive")
    if phase_noise_rel_fundamental < 1 or amp_noise_rel_second < 1:
        raise DomainError("noise below the shot-noise limit is out of scope")
    return raw_ratio * amp_noise_rel_second / phase_noise_rel_fundamental
