"""Fringe-free displacement calibration for shot-noise-limited homodyne interferometry."""

from .calib import build_report, calibrate_displacement, compare_sql, run_voltage_sweep
from .errors import FringelessError
from .model import DetectionChain, LockPoint, Modulation, OpticalField, QuadratureNoise
from .synth import PhotocurrentTrace, SynthesisPlan, synthesize_trace

__version__ = "0.1.0"

__all__ = [
    "DetectionChain",
    "FringelessError",
    "LockPoint",
    "Modulation",
    "OpticalField",
    "PhotocurrentTrace",
    "QuadratureNoise",
    "SynthesisPlan",
    "build_report",
    "calibrate_displacement",
    "compare_sql",
    "run_voltage_sweep",
    "synthesize_trace",
]
