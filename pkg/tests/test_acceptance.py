"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the measured
figures before asserting, so the outcome is visible in ``pytest -v -s`` output
and in the captured log either way.
"""

import math
import time

import numpy as np
import pytest

from fringeless import calib, cli, dsp, model
from fringeless.config import RunConfig
from fringeless.model import DetectionChain, Modulation, OpticalField, QuadratureNoise
from fringeless.synth import SynthesisPlan, synthesize_trace
from fringeless.traceio import ingest_trace, write_trace
from oracles import bessel_series_exact

SEED = 0
VOLTAGES = tuple(float(v) for v in range(1, 11))
TRUE_SLOPE_M_PER_V = 0.55e-10


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def default_sweep():
    return calib.run_voltage_sweep(SynthesisPlan(rng_seed=SEED), VOLTAGES)


@pytest.fixture(scope="module")
def default_calibration(default_sweep):
    return calib.calibrate_displacement(default_sweep, OpticalField())


def test_1_bessel_oracle(capsys):
    x = np.linspace(2e-3, 2.0, 1000)
    start = time.perf_counter()
    values = {n: np.array([model.bessel_j(n, xi) for xi in x]) for n in range(4)}
    elapsed = time.perf_counter() - start
    worst = 0.0
    for n, got in values.items():
        exact = np.array([bessel_series_exact(n, float(xi)) for xi in x])
        worst = max(worst, float(np.max(np.abs(got - exact) / np.abs(exact))))
    ok = worst <= 1e-12 and elapsed < 1.0
    verdict(capsys, 1, ok, f"max rel err {worst:.2e} (<= 1e-12), 4000 evaluations in {elapsed:.3f} s (< 1 s)")


def test_2_quadrature_noise_monte_carlo(capsys):
    # Modulation off. A 200 kHz reference keeps 400 traces cheap; nothing
    # here depends on the carrier frequency.
    f_ref, cutoff, n_traces = 200e3, 1e3, 200
    base = SynthesisPlan(
        duration_s=0.1, sample_rate_Hz=8 * f_ref, mod=Modulation(frequency_Hz=f_ref, drive_voltage_V=0.0)
    )
    start = time.perf_counter()
    readings, predicted = {}, {}
    for lock in (0.0, math.pi / 2):
        plan = base.with_(mean_phase_rad=lock)
        ds = model.homodyne_noise_std(plan.field, plan.det, lock, plan.noise)
        powers = []
        for i in range(n_traces):
            d = dsp.demodulate(synthesize_trace(plan.with_(rng_seed=calib.derive_seed(SEED, i, 7))), f_ref, cutoff)
            powers.append(np.mean(d.i**2 + d.q**2))
        powers = np.array(powers)
        readings[lock] = (powers.mean(), powers.std(ddof=1) / math.sqrt(n_traces))
        # Power within the reference RBW is dS^2 / 2; the envelope carries half of it.
        predicted[lock] = ds**2 / 4 * d.enbw_Hz / dsp.enbw(plan.det.rbw_Hz)
    elapsed = time.perf_counter() - start
    z = {lock: (readings[lock][0] - predicted[lock]) / readings[lock][1] for lock in readings}
    db = 10 * math.log10(readings[math.pi / 2][0] / readings[0.0][0])
    ok = all(abs(v) < 3 for v in z.values()) and abs(db) < 0.2 and elapsed < 120
    verdict(
        capsys, 2, ok,
        f"deviation {z[0.0]:+.2f} SE at lock 0, {z[math.pi / 2]:+.2f} SE at lock pi/2 (|.| < 3); "
        f"quadrature imbalance {db:+.3f} dB (< 0.2 dB); {elapsed:.0f} s",
    )


def _bessel_peak_error(sample_rate_Hz):
    knd = 0.3
    plan = SynthesisPlan(
        duration_s=0.1, sample_rate_Hz=sample_rate_Hz, noise=QuadratureNoise.noiseless()
    ).with_(residual_jitter_rad=0.0, mean_phase_rad=math.pi / 4)
    plan = plan.with_(displacement_per_volt_m=knd / (plan.field.wavenumber * plan.mod.drive_voltage_V))
    x = synthesize_trace(plan).samples
    spec = np.abs(np.fft.rfft(x)) * 2 / x.size
    spec[0] /= 2
    scale = model.homodyne_mean(plan.field, plan.det, 0.0) * math.cos(math.pi / 4)
    errors = {}
    for m in range(5):
        k = int(round(m * plan.mod.frequency_Hz * plan.duration_s))
        expected = model.bessel_j(m, knd) * (1 if m == 0 else 2)
        errors[m] = abs(spec[k] / scale / expected - 1)
    return errors


def test_3_harmonic_structure(capsys):
    # At exactly 8x the modulation frequency J6 aliases onto the J2 bin; 17 MHz
    # keeps every alias off the harmonic bins.
    worst = max(_bessel_peak_error(17e6).values())
    aliased = _bessel_peak_error(16e6)[2]
    verdict(
        capsys, 3, worst <= 1e-6,
        f"J0..J4 max rel err {worst:.2e} at 17 MHz (<= 1e-6); J2 err {aliased:.2e} at 16 MHz from J6 aliasing",
    )


def test_4_voltage_sweep(capsys, default_sweep, default_calibration):
    g = calib.growth_exponents(default_sweep)
    cal = default_calibration
    slope_A = cal.displacement_per_volt_m * 1e10
    se_A = cal.displacement_per_volt_stderr_m * 1e10
    ok = abs(g.fundamental - 1) <= 0.02 and abs(g.second - 2) <= 0.05 and abs(slope_A - 0.55) <= 0.02
    verdict(
        capsys, 4, ok,
        f"exponents {g.fundamental:.4f} +/- {g.fundamental_stderr:.4f} (1 +/- 0.02), "
        f"{g.second:.3f} +/- {g.second_stderr:.3f} (2 +/- 0.05); "
        f"slope {slope_A:.4f} +/- {se_A:.4f} A/V (0.55 +/- 0.02)",
    )


def test_5_field_strength_independence(capsys, default_calibration):
    # Same seed, four times the signal power: only the field strength changes.
    base = SynthesisPlan(rng_seed=SEED)
    bright = base.with_(signal_power_W=4 * base.field.signal_power_W)
    # 460 uW against a 1.5 mW local oscillator is outside the strong-LO regime.
    with pytest.warns(model.HomodyneApproximationWarning):
        cal = calib.calibrate_displacement(calib.run_voltage_sweep(bright, VOLTAGES), bright.field)
    ref = default_calibration
    diff = cal.displacement_per_volt_m - ref.displacement_per_volt_m
    sigma = math.hypot(cal.displacement_per_volt_stderr_m, ref.displacement_per_volt_stderr_m)
    verdict(
        capsys, 5, abs(diff) < sigma,
        f"slope {ref.displacement_per_volt_m * 1e10:.4f} -> {cal.displacement_per_volt_m * 1e10:.4f} A/V, "
        f"change {abs(diff) / sigma:.2f} combined sigma (< 1)",
    )


def test_6_sql_arithmetic(capsys):
    field, det = OpticalField(), DetectionChain()
    start = time.perf_counter()
    out = calib.compare_sql(7.0e-15, field, det, efficiency=0.667)
    elapsed = time.perf_counter() - start
    ok = (
        abs(out.photon_number / 2.7e12 - 1) <= 0.02
        and abs(out.sql_per_rtHz_m / 5.4e-15 - 1) <= 0.02
        and abs(out.ratio - 1.30) <= 0.03
        and elapsed < 1
    )
    verdict(
        capsys, 6, ok,
        f"N {out.photon_number:.4g} (2.7e12 +/- 2%), SQL {out.sql_per_rtHz_m:.4g} m/rtHz "
        f"(5.4e-15 +/- 2%), ratio {out.ratio:.3f} (1.30 +/- 0.03)",
    )


def test_7_sensitivity(capsys, default_sweep):
    cfg = RunConfig(experiment="sensitivity", seed=SEED)
    plan = cfg.plan
    n_eff = model.effective_photon_number(plan.field, plan.det)
    grid = cfg.sensitivity_grid()
    sens_sweep = calib.run_voltage_sweep(
        plan, grid, cli._sensitivity_seeds(SEED, len(grid)), include_second=False
    )
    rep, _, _ = calib.build_report(default_sweep, plan.field, plan.det, sensitivity_sweep=sens_sweep)
    analytic = plan.field.wavelength_m / (4 * math.pi * math.sqrt(n_eff))
    identity = rep.d_min_per_rtHz_m * math.sqrt(50.0)
    ok = (
        abs(n_eff / 2.7e12 - 1) <= 0.01
        and abs(rep.d_min_m / 3.85e-14 - 1) <= 0.10
        and abs(rep.d_min_per_rtHz_m / 5.45e-15 - 1) <= 0.10
        # Exact up to the rounding of one division and one multiplication.
        and math.isclose(identity, rep.d_min_m, rel_tol=4 * np.finfo(float).eps, abs_tol=0.0)
        and 0.9 <= rep.sql_ratio <= 1.15
    )
    verdict(
        capsys, 7, ok,
        f"N_eff {n_eff:.4g}; d_min {rep.d_min_m:.4g} m (analytic {analytic:.4g}, 3.85e-14 +/- 10%), "
        f"{rep.d_min_per_rtHz_m:.4g} m/rtHz (5.45e-15 +/- 10%), identity off by "
        f"{abs(identity / rep.d_min_m - 1):.1e}, sql_ratio {rep.sql_ratio:.3f} ([0.9, 1.15])",
    )


def test_8_classical_noise_correction(capsys):
    # Phase noise at the fundamental at 4x shot noise in variance, second harmonic shot limited.
    plan = SynthesisPlan(rng_seed=SEED).with_(phase_var_scaled=1.0)
    sweep = calib.run_voltage_sweep(plan, VOLTAGES)
    fit = calib.calibrate_displacement(sweep, plan.field).fit
    kn = plan.field.wavenumber * plan.field.refractive_index
    true_slope = kn * TRUE_SLOPE_M_PER_V / 4
    bias = fit.slope / true_slope
    phase_rel = math.sqrt(plan.noise.phase_var_scaled / model.SHOT_NOISE_VARIANCE)
    amp_rel = math.sqrt(plan.noise.amp_var / model.SHOT_NOISE_VARIANCE)
    corrected = model.classical_noise_corrected_ratio(fit.slope, phase_rel, amp_rel)
    factor = corrected / fit.slope
    ok = abs(bias / 2 - 1) <= 0.10 and abs(factor - 0.5) < 1e-12 and abs(corrected / true_slope - 1) <= 0.10
    verdict(
        capsys, 8, ok,
        f"raw ratio slope {bias:.3f} x true (2 +/- 10%), correction factor x{factor:g} (1/2), "
        f"corrected {corrected / true_slope:.3f} x true (1 +/- 10%)",
    )


def test_9_determinism_and_round_trip(capsys, tmp_path):
    cfg = RunConfig(
        experiment="calibrate",
        plan=SynthesisPlan(duration_s=0.1),
        voltages_V=(5.0, 6.0, 7.0, 8.0, 9.0, 10.0),
        n_floor_offsets=32,
        seed=123,
    ).with_seed(123)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        paths = cli.execute(RunConfig(**{**cfg.__dict__, "out_dir": out}))
        runs.append({p.name: p.read_bytes() for p in paths})
    identical = runs[0] == runs[1] and len(runs[0]) == 3

    trace = synthesize_trace(SynthesisPlan(duration_s=0.1, rng_seed=9))
    exact = True
    for include_time in (False, True):
        path = tmp_path / f"trace_{include_time}.csv"
        write_trace(trace, path, include_time=include_time)
        back = ingest_trace(path)
        exact &= back.samples.tobytes() == trace.samples.tobytes()
    verdict(
        capsys, 9, identical and exact,
        f"rerun artifacts byte-identical: {identical} ({', '.join(sorted(runs[0]))}); "
        f"trace round trip bit-exact: {exact}",
    )
