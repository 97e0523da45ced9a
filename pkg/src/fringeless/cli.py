"""Command-line front end.

    fringeless calibrate     [--config FILE] [--seed N] [--out DIR] [--workers N] [--format json|csv]
    fringeless sensitivity   ...
    fringeless sql-compare   --measured M_PER_RTHZ ...
    fringeless analyze-trace --trace FILE ...

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 pipeline or regime error. ``FRINGELESS_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import warnings
from pathlib import Path
from typing import Sequence

from . import calib, dsp, report, traceio
from .config import EXPERIMENTS, FORMATS, RunConfig, read_mapping, config_from_mapping
from .errors import ConfigurationError, FringelessError

log = logging.getLogger("fringeless")

LOCK_SENSITIVITY = 2


def _sensitivity_seeds(base: int, n: int) -> list[tuple[int, int]]:
    # A lock id of its own keeps these independent of the calibration sweep.
    return [(calib.derive_seed(base, i, LOCK_SENSITIVITY), 0) for i in range(n)]


def _harmonic_order(cfg: RunConfig, lock_phase: float) -> int:
    if cfg.harmonic_order is not None:
        return cfg.harmonic_order
    # Phase quadrature carries the fundamental, amplitude quadrature the second.
    return 2 if abs(math.cos(lock_phase)) > abs(math.sin(lock_phase)) else 1


def _calibrate(cfg: RunConfig) -> dict[str, str]:
    plan = cfg.plan
    sweep = calib.run_voltage_sweep(
        plan, cfg.voltages_V, workers=cfg.workers, n_floor_offsets=cfg.n_floor_offsets
    )
    sens_sweep = None
    if cfg.experiment == "sensitivity":
        grid = cfg.sensitivity_grid()
        sens_sweep = calib.run_voltage_sweep(
            plan, grid, _sensitivity_seeds(cfg.seed, len(grid)),
            include_second=False, workers=cfg.workers, n_floor_offsets=cfg.n_floor_offsets,
        )
    rep, cal, sens = calib.build_report(
        sweep, plan.field, plan.det,
        sensitivity_sweep=sens_sweep, snr_threshold=cfg.snr_threshold, efficiency=cfg.efficiency,
    )
    results = rep.to_dict()
    results["voltages_used_V"] = list(cal.voltages_used_V)
    results["voltages_excluded_V"] = list(cal.voltages_excluded_V)
    results["crossing_voltage_V"] = sens.crossing_voltage_V
    results["sensitivity_fit_through_origin"] = sens.fit.intercept_stderr == 0.0
    out = {"report.json": report.dumps_json(report.envelope(cfg, results))}
    out["sweep.csv"] = report.sweep_csv(sweep)
    out["sensitivity.csv"] = report.sensitivity_csv(sens_sweep or sweep, cal.displacement_per_volt_m)
    return out


def _sql_compare(cfg: RunConfig) -> dict[str, str]:
    plan = cfg.plan
    sql = calib.compare_sql(cfg.measured_sensitivity_m_per_rtHz, plan.field, plan.det, cfg.efficiency)
    results = {
        "measured_sensitivity_m_per_rtHz": cfg.measured_sensitivity_m_per_rtHz,
        "photon_number_count": sql.photon_number,
        "sql_m": sql.sql_m,
        "sql_per_rtHz_m_per_rtHz": sql.sql_per_rtHz_m,
        "sql_ratio_dimless": sql.ratio,
    }
    return {"report.json": report.dumps_json(report.envelope(cfg, results))}


def _analyze_trace(cfg: RunConfig) -> dict[str, str]:
    trace = traceio.ingest_trace(cfg.trace_path, required=traceio.ANALYSIS_KEYS)
    mod_freq = float(trace.acquisition("mod_freq_Hz"))
    lock = float(trace.acquisition("lock_phase_rad"))
    order = _harmonic_order(cfg, lock)
    settings = dsp.ZeroSpanSettings(order * mod_freq, cfg.plan.det.rbw_Hz, cfg.plan.det.vbw_Hz)
    m = dsp.extract_harmonic_snr(trace, mod_freq, order, settings, n_floor_offsets=cfg.n_floor_offsets)
    results = report.measurement_dict(m)
    results["trace_samples_count"] = len(trace)
    results["trace_sample_rate_Hz"] = trace.sample_rate_Hz
    results["trace_units"] = str(trace.metadata.get("units", "arb"))
    return {
        "report.json": report.dumps_json(report.envelope(cfg, results)),
        "harmonic.csv": report.harmonic_csv(m),
    }


_RUNNERS = {
    "calibrate": _calibrate,
    "sensitivity": _calibrate,
    "sql-compare": _sql_compare,
    "analyze-trace": _analyze_trace,
}


def execute(cfg: RunConfig) -> list[Path]:
    """Run the configured experiment and write its artifacts; raise on failure.

    Artifacts are rendered in memory first, then each is written atomically.
    If any write fails the ones already written are removed.
    """
    artifacts = _RUNNERS[cfg.experiment](cfg)
    wanted = {
        name: text for name, text in artifacts.items()
        if ("json" if name.endswith(".json") else "csv") in cfg.formats
    }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        for name, text in wanted.items():
            path = cfg.out_dir / name
            traceio.atomic_write(path, [text])
            written.append(path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return written


def run_experiment(cfg: RunConfig) -> int:
    """Exit status of running ``cfg``; diagnostics go to the log."""
    try:
        paths = execute(cfg)
    except FringelessError as exc:
        log.error("%s", exc)
        return exc.exit_code
    for path in paths:
        log.info("wrote %s", path)
    return 0


def _configure_logging() -> None:
    level = os.environ.get("FRINGELESS_LOG", "WARNING").strip().upper()
    numeric = logging.getLevelName(level) if not level.isdigit() else int(level)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fringeless",
        description="Fringe-free displacement calibration of a shot-noise-limited homodyne interferometer.",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", type=Path, help="flat YAML configuration file")
    parser.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--workers", type=int, help="parallel sweep workers")
    parser.add_argument(
        "--format", choices=FORMATS, action="append", dest="formats",
        help="artifact format; repeat for both (default: both)",
    )
    parser.add_argument("--measured", type=float, help="measured sensitivity in m/sqrt(Hz) (sql-compare)")
    parser.add_argument("--trace", type=Path, help="trace CSV file (analyze-trace)")
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    lines: dict = {}
    source = "<command line>"
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc.strerror}") from exc
        source = str(args.config)
        values, lines = read_mapping(text, source)
    if "experiment" in values and values["experiment"] != args.experiment:
        raise ConfigurationError(
            f"{source}:{lines['experiment']}: experiment {values['experiment']!r} "
            f"conflicts with command {args.experiment!r}"
        )
    values["experiment"] = args.experiment
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "workers": args.workers,
        "formats": args.formats,
        "measured_sensitivity_m_per_rtHz": args.measured,
        "trace_path": args.trace,
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = str(value) if isinstance(value, Path) else value
            lines.pop(key, None)
    return config_from_mapping(values, lines, source)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except FringelessError as exc:
        log.error("%s", exc)
        return exc.exit_code
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
