import json
import logging
import subprocess
import sys

import pytest

from fringeless import cli, report
from fringeless.synth import SynthesisPlan, synthesize_trace
from fringeless.traceio import write_trace

SMALL = "duration_s: 0.1\nvoltages_V: [5, 6, 7, 8, 9, 10]\nn_floor_offsets: 64\n"

CONFIG_KEYS = {
    "wavelength_m", "signal_power_W", "lo_power_W", "refractive_index_dimless",
    "quantum_efficiency_dimless", "overlap_dimless", "rbw_Hz", "vbw_Hz", "mod_freq_Hz",
    "true_displacement_per_volt_m_per_V", "residual_jitter_rad", "amp_var_dimless",
    "phase_var_scaled_dimless", "sample_rate_Hz", "duration_s", "snr_threshold_dimless",
    "n_floor_offsets_count",
}
CALIBRATE_KEYS = {
    "displacement_per_volt_m_per_V", "displacement_per_volt_stderr_m_per_V", "d_min_m",
    "d_min_stderr_m", "d_min_per_rtHz_m_per_rtHz", "photon_number_count", "sql_m",
    "sql_per_rtHz_m_per_rtHz", "sql_ratio_dimless", "rbw_Hz",
    "linearity_exponent_fundamental_dimless", "linearity_exponent_fundamental_stderr_dimless",
    "quadratic_exponent_second_dimless", "quadratic_exponent_second_stderr_dimless",
    "ratio_slope_per_V", "ratio_slope_stderr_per_V", "ratio_intercept_dimless",
    "ratio_intercept_stderr_dimless", "ratio_fit_reduced_chi_sq_dimless", "intercept_consistent",
    "saturated", "voltages_used_V", "voltages_excluded_V", "crossing_voltage_V",
    "sensitivity_fit_through_origin",
}
SQL_KEYS = {
    "measured_sensitivity_m_per_rtHz", "photon_number_count", "sql_m",
    "sql_per_rtHz_m_per_rtHz", "sql_ratio_dimless",
}
TRACE_KEYS = {
    "harmonic_order_count", "drive_voltage_V", "lock_phase_rad", "rbw_Hz", "signal_power_units2",
    "signal_power_stderr_units2", "noise_floor_power_units2", "noise_floor_stderr_units2",
    "snr_amplitude_dimless", "snr_amplitude_stderr_dimless", "snr_excess_dimless",
    "snr_excess_stderr_dimless", "trace_samples_count", "trace_sample_rate_Hz", "trace_units",
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def sensitivity_run(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("sens")
    code = cli.main(["sensitivity", "--config", str(small_config), "--out", str(out), "--seed", "3"])
    return code, out


@pytest.fixture(scope="module")
def trace_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("trace") / "amp.csv"
    plan = SynthesisPlan(duration_s=0.1, rng_seed=1).with_(mean_phase_rad=0.0)
    write_trace(synthesize_trace(plan), path)
    return path


def load(path):
    return json.loads(path.read_text())


class TestSensitivityVerb:
    def test_succeeds_with_all_artifacts(self, sensitivity_run):
        code, out = sensitivity_run
        assert code == 0
        assert sorted(p.name for p in out.iterdir()) == ["report.json", "sensitivity.csv", "sweep.csv"]

    def test_schema(self, sensitivity_run):
        doc = load(sensitivity_run[1] / "report.json")
        assert set(doc) == {"schema_version", "experiment", "seed", "config", "results"}
        assert doc["schema_version"] == "1.0" and doc["experiment"] == "sensitivity"
        assert doc["seed"] == "3"
        assert set(doc["config"]) == CONFIG_KEYS | {"voltages_V", "sensitivity_voltages_V"}
        assert set(doc["results"]) == CALIBRATE_KEYS

    def test_units_on_every_number(self, sensitivity_run):
        assert report.unsuffixed_numeric_keys(load(sensitivity_run[1] / "report.json")) == []

    def test_csv_headers(self, sensitivity_run):
        out = sensitivity_run[1]
        sweep = (out / "sweep.csv").read_text().splitlines()
        assert sweep[0] == ",".join(report.SWEEP_COLUMNS)
        assert len(sweep) == 1 + 6
        sens = (out / "sensitivity.csv").read_text().splitlines()
        assert sens[0] == ",".join(report.SENSITIVITY_COLUMNS)
        assert len(sens) == 1 + 12

    def test_sensible_values(self, sensitivity_run):
        r = load(sensitivity_run[1] / "report.json")["results"]
        assert r["d_min_per_rtHz_m_per_rtHz"] * r["rbw_Hz"] ** 0.5 == pytest.approx(r["d_min_m"], rel=1e-12)
        assert r["photon_number_count"] == pytest.approx(2.7e12, rel=0.02)
        assert 0.5 < r["sql_ratio_dimless"] < 2.5

    def test_rerun_is_byte_identical(self, sensitivity_run, small_config, tmp_path):
        cli.main(["sensitivity", "--config", str(small_config), "--out", str(tmp_path), "--seed", "3"])
        for name in ("report.json", "sweep.csv", "sensitivity.csv"):
            assert (tmp_path / name).read_bytes() == (sensitivity_run[1] / name).read_bytes()

    def test_workers_do_not_change_results(self, sensitivity_run, small_config, tmp_path):
        cli.main(["sensitivity", "--config", str(small_config), "--out", str(tmp_path), "--seed", "3",
                  "--workers", "2"])
        assert (tmp_path / "sweep.csv").read_bytes() == (sensitivity_run[1] / "sweep.csv").read_bytes()


class TestOtherVerbs:
    def test_sql_compare(self, tmp_path):
        assert cli.main(["sql-compare", "--measured", "7e-15", "--out", str(tmp_path)]) == 0
        doc = load(tmp_path / "report.json")
        assert set(doc["results"]) == SQL_KEYS
        assert set(doc["config"]) == CONFIG_KEYS
        r = doc["results"]
        assert r["photon_number_count"] == pytest.approx(2.7e12, rel=0.01)
        assert r["sql_per_rtHz_m_per_rtHz"] == pytest.approx(5.4e-15, rel=0.01)
        assert r["sql_ratio_dimless"] == pytest.approx(1.3, abs=0.02)
        assert [p.name for p in tmp_path.iterdir()] == ["report.json"]

    def test_analyze_trace(self, tmp_path, trace_file):
        assert cli.main(["analyze-trace", "--trace", str(trace_file), "--out", str(tmp_path)]) == 0
        doc = load(tmp_path / "report.json")
        assert set(doc["results"]) == TRACE_KEYS
        r = doc["results"]
        # Amplitude-quadrature lock selects the second harmonic.
        assert r["harmonic_order_count"] == 2
        assert r["snr_excess_dimless"] == pytest.approx(15.5, rel=0.15)
        assert report.unsuffixed_numeric_keys(doc) == []
        csv = (tmp_path / "harmonic.csv").read_text().splitlines()
        assert len(csv) == 2

    def test_format_filter(self, tmp_path, trace_file):
        args = ["analyze-trace", "--trace", str(trace_file), "--out", str(tmp_path), "--format", "csv"]
        assert cli.main(args) == 0
        assert [p.name for p in tmp_path.iterdir()] == ["harmonic.csv"]


class TestExitCodes:
    def test_configuration_error(self, tmp_path, caplog):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("rbw_Hz: -1\n")
        with caplog.at_level(logging.ERROR, logger="fringeless"):
            assert cli.main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert f"{cfg}:1: rbw_Hz" in caplog.text
        assert not (tmp_path / "o").exists()

    def test_verb_conflicts_with_config(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("experiment: sensitivity\n")
        assert cli.main(["calibrate", "--config", str(cfg)]) == 2

    def test_missing_measurement(self):
        assert cli.main(["sql-compare"]) == 2

    def test_ingestion_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("# units: V\nvalue\n1\n")
        assert cli.main(["analyze-trace", "--trace", str(bad), "--out", str(tmp_path / "o")]) == 3
        assert not (tmp_path / "o" / "report.json").exists()

    def test_pipeline_error_leaves_no_artifacts(self, tmp_path):
        # Second-harmonic SNR stays below threshold everywhere: calibration cannot run.
        cfg = tmp_path / "weak.yaml"
        cfg.write_text("duration_s: 0.1\nvoltages_V: [1, 2, 3]\nn_floor_offsets: 16\n")
        out = tmp_path / "o"
        assert cli.main(["calibrate", "--config", str(cfg), "--out", str(out)]) == 4
        assert not out.exists() or list(out.iterdir()) == []

    def test_failed_write_removes_earlier_artifacts(self, tmp_path, trace_file, monkeypatch):
        calls = []
        real = cli.traceio.atomic_write

        def flaky(path, chunks):
            calls.append(path)
            if len(calls) == 2:
                raise OSError("disk full")
            real(path, chunks)

        monkeypatch.setattr(cli.traceio, "atomic_write", flaky)
        cfg = cli.build_config(cli._parser().parse_args(
            ["analyze-trace", "--trace", str(trace_file), "--out", str(tmp_path)]))
        with pytest.raises(OSError):
            cli.execute(cfg)
        assert list(tmp_path.iterdir()) == []


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fringeless", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "calibrate" in proc.stdout and "analyze-trace" in proc.stdout
