"""CSV trace files: ``# key: value`` header lines, then one sample per row.

Rows are either ``value`` or ``time,value``. A time column must be uniform
to 1 ppm of the sample period. Floats are written with 17 significant
digits, so a write/read cycle reproduces the samples bit for bit.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import IngestionError
from .synth import PhotocurrentTrace

ANALYSIS_KEYS = ("lock_phase_rad", "drive_voltage_V", "mod_freq_Hz")
TIME_UNIFORMITY = 1e-6
_WRITE_BLOCK = 1 << 16


@dataclass(frozen=True)
class TraceFileHeader:
    sample_rate_Hz: float
    units: str = "arb"
    metadata: Mapping[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.sample_rate_Hz) and self.sample_rate_Hz > 0):
            raise IngestionError("sample_rate_Hz must be present and positive")


def _header_value(text: str) -> Any:
    try:
        return float(text)
    except ValueError:
        return text


def _format(value: Any) -> str:
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def atomic_write(path: Path, chunks: Iterable[str]) -> None:
    """Write through a temporary sibling, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(
    trace: PhotocurrentTrace, path: str | os.PathLike, *, include_time: bool = False, units: str = "arb"
) -> None:
    """Serialize ``trace`` with its acquisition parameters in the header."""
    meta: dict[str, Any] = {}
    for key in ANALYSIS_KEYS:
        value = trace.acquisition(key)
        if value is not None:
            meta[key] = float(value)
    for key, value in trace.metadata.items():
        if key not in meta and key not in ("sample_rate_Hz", "units", "start_time_s"):
            meta[key] = value

    def lines():
        yield f"# sample_rate_Hz: {_format(float(trace.sample_rate_Hz))}\n"
        yield f"# units: {units}\n"
        yield f"# start_time_s: {_format(float(trace.start_time_s))}\n"
        for key, value in meta.items():
            yield f"# {key}: {_format(value)}\n"
        yield "time,value\n" if include_time else "value\n"
        samples = trace.samples
        times = trace.times() if include_time else None
        for start in range(0, samples.size, _WRITE_BLOCK):
            block = samples[start : start + _WRITE_BLOCK].tolist()
            if include_time:
                tb = times[start : start + _WRITE_BLOCK].tolist()
                yield "".join("%.17g,%.17g\n" % tv for tv in zip(tb, block))
            else:
                yield "".join("%.17g\n" % v for v in block)

    atomic_write(Path(path), lines())


def _parse_header(lines: list[str], source: str) -> tuple[TraceFileHeader, float, int]:
    meta: dict[str, Any] = {}
    n = 0
    for n, raw in enumerate(lines, start=1):
        if not raw.startswith("#"):
            n -= 1
            break
        body = raw[1:].strip()
        if not body:
            continue
        key, sep, value = body.partition(":")
        if not sep:
            raise IngestionError(f"{source}: row {n}: header line is not 'key: value'")
        meta[key.strip()] = _header_value(value.strip())
    if "sample_rate_Hz" not in meta:
        raise IngestionError(f"{source}: header lacks sample_rate_Hz")
    rate = meta.pop("sample_rate_Hz")
    if not isinstance(rate, float):
        raise IngestionError(f"{source}: sample_rate_Hz is not a number")
    units = str(meta.pop("units", "arb"))
    start = meta.pop("start_time_s", 0.0)
    if not isinstance(start, float):
        raise IngestionError(f"{source}: start_time_s is not a number")
    return TraceFileHeader(rate, units, meta), start, n


def _locate_bad_row(rows: list[str], first_row: int, ncols: int, source: str) -> None:
    for i, row in enumerate(rows):
        cells = row.split(",")
        if len(cells) != ncols:
            raise IngestionError(f"{source}: row {first_row + i}: expected {ncols} column(s)")
        for cell in cells:
            try:
                float(cell)
            except ValueError:
                raise IngestionError(f"{source}: row {first_row + i}: not a number: {cell.strip()!r}") from None


def ingest_trace(path: str | os.PathLike, *, required: Iterable[str] = ()) -> PhotocurrentTrace:
    """Read a trace file; ``required`` names header keys that must be present.

    Row numbers in diagnostics are 1-based file line numbers.
    """
    path = Path(path)
    source = str(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read trace {path}: {exc.strerror}") from exc
    lines = text.splitlines()
    header, start_time, n_header = _parse_header(lines, source)
    missing = [k for k in required if k not in header.metadata]
    if missing:
        raise IngestionError(f"{source}: header lacks required key(s): {', '.join(missing)}")

    body_start = n_header
    columns = 1
    if body_start < len(lines):
        first = lines[body_start].strip().lower()
        if first in ("value", "time,value"):
            columns = 2 if first == "time,value" else 1
            body_start += 1
        elif "," in first:
            columns = 2
    rows = lines[body_start:]
    while rows and not rows[-1].strip():
        rows.pop()
    first_row = body_start + 1
    if not rows:
        raise IngestionError(f"{source}: no samples")

    flat = "\n".join(rows)
    if flat.count(",") != (columns - 1) * len(rows):
        _locate_bad_row(rows, first_row, columns, source)
    try:
        data = np.array(flat.replace(",", " ").split(), dtype=float)
    except ValueError:
        _locate_bad_row(rows, first_row, columns, source)
        raise
    if data.size != columns * len(rows):
        _locate_bad_row(rows, first_row, columns, source)
        raise IngestionError(f"{source}: ragged rows")
    data = data.reshape(len(rows), columns)

    bad = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
    if bad.size:
        rows_named = ", ".join(str(first_row + int(i)) for i in bad[:5])
        raise IngestionError(f"{source}: non-finite value at row(s) {rows_named}")

    rate = header.sample_rate_Hz
    if columns == 2:
        times = data[:, 0]
        if times.size > 1:
            period = 1.0 / rate
            dev = np.abs(np.diff(times) - period)
            worst = int(np.argmax(dev))
            if dev[worst] > TIME_UNIFORMITY * period:
                raise IngestionError(
                    f"{source}: row {first_row + worst + 1}: timestamps deviate from the "
                    f"{rate:g} Hz grid by {dev[worst] / period:.2g} of a sample period"
                )
        start_time = float(times[0])
    meta = dict(header.metadata, units=header.units, source=f"file:{path.name}")
    return PhotocurrentTrace(data[:, -1], rate, start_time, plan=None, metadata=meta)
