"""Load-cell force series: CSV input, moving-average smoothing, resultant magnitude."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORCE_CHANNELS = ("fx_n", "fy_n", "fz_n")
TORQUE_CHANNELS = ("tx_nm", "ty_nm", "tz_nm")


class ForceFileError(ValueError):
    """Malformed force CSV; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class ForceSeries:
    channels: dict
    sample_rate_hz: float = 1000.0
    t_s: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        chans = {k: np.asarray(v, dtype=float) for k, v in self.channels.items()}
        lengths = {len(v) for v in chans.values()}
        if len(lengths) > 1:
            raise ValueError(f"channels differ in length: {sorted(lengths)}")
        object.__setattr__(self, "channels", chans)
        if self.t_s is None:
            n = lengths.pop() if lengths else 0
            object.__setattr__(self, "t_s", np.arange(n) / self.sample_rate_hz)

    def __len__(self):
        return len(self.t_s)

    def __getitem__(self, name):
        return self.channels[name]


def read_force_csv(path) -> ForceSeries:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ForceFileError(f"{path}: empty force file")
    rows = list(csv.reader(io.StringIO(text)))
    header = [h.strip() for h in rows[0]]
    expected = ["t_s", *FORCE_CHANNELS]
    if header[:4] != expected or header[4:] not in ([], list(TORQUE_CHANNELS)):
        raise ForceFileError(
            f"header must be {','.join(expected)}[,{','.join(TORQUE_CHANNELS)}], got {','.join(header)}", 1)
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ForceFileError(f"expected {len(header)} columns, found {len(row)}", lineno)
        try:
            nums = [float(c) for c in row]
        except ValueError:
            raise ForceFileError(f"non-numeric value in {row}", lineno) from None
        if not all(math.isfinite(v) for v in nums):
            raise ForceFileError("non-finite value", lineno)
        if values and nums[0] <= values[-1][0]:
            raise ForceFileError("time column must increase monotonically", lineno)
        values.append(nums)
    if not values:
        raise ForceFileError(f"{path}: no samples")
    data = np.array(values)
    t = data[:, 0]
    rate = 1.0 / float(np.median(np.diff(t))) if len(t) > 1 else 1000.0
    return ForceSeries({name: data[:, i + 1] for i, name in enumerate(header[1:])}, rate, t)


def write_force_csv(path, series: ForceSeries) -> None:
    names = [c for c in (*FORCE_CHANNELS, *TORQUE_CHANNELS) if c in series.channels]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", *names])
        cols = [series.t_s] + [series[c] for c in names]
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def moving_average(x, span: int = 100) -> np.ndarray:
    """Centred moving average with shrinking symmetric windows at the ends.

    An even ``span`` is reduced by one. Sample ``i`` averages
    ``min(half, i, n-1-i)`` neighbours on each side, so the end samples keep
    their raw values.
    """
    if int(span) != span or span < 1:
        raise ValueError(f"span must be a positive integer, got {span}")
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("cannot smooth an empty series")
    width = span - 1 if span % 2 == 0 else span
    half = width // 2
    i = np.arange(n)
    k = np.minimum(np.minimum(i, n - 1 - i), half)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    return (csum[i + k + 1] - csum[i - k]) / (2 * k + 1)


def smooth_forces(series: ForceSeries, span: int = 100) -> ForceSeries:
    if len(series) == 0:
        raise ValueError("cannot smooth an empty series")
    smoothed = {name: moving_average(v, span) for name, v in series.channels.items()}
    return replace(series, channels=smoothed)


def force_magnitude(series: ForceSeries) -> np.ndarray:
    missing = [c for c in FORCE_CHANNELS if c not in series.channels]
    if missing:
        raise ValueError(f"missing force channels: {', '.join(missing)}")
    fx, fy, fz = (series[c] for c in FORCE_CHANNELS)
    return np.sqrt(fx * fx + fy * fy + fz * fz)


def max_force_magnitude(series: ForceSeries, span: int = 100) -> float:
    """Peak resultant force of the smoothed channels."""
    if len(series) == 0:
        raise ValueError("empty force series")
    return float(force_magnitude(smooth_forces(series, span)).max())


def force_summary(series: ForceSeries, span: int = 100) -> dict:
    smoothed = smooth_forces(series, span)
    return {
        "samples": len(series),
        "sample_rate_hz": series.sample_rate_hz,
        "span": span,
        "max_magnitude_n": float(force_magnitude(smoothed).max()),
        "channels": {
            name: {"min": float(v.min()), "max": float(v.max())}
            for name, v in smoothed.channels.items()
        },
    }
