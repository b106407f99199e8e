"""QBER series, stability statistics and rate extrapolation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

DEFAULT_WINDOW_BYTES = 2048
DEFAULT_DUTY_CYCLE = 0.5


@dataclass
class QberSeries:
    """Per-window error fraction against cumulative key size."""

    window_bytes: int = DEFAULT_WINDOW_BYTES
    points: list[tuple[int, float]] = field(default_factory=list)
    # trailing window shorter than window_bytes: (bits, errors)
    partial: tuple[int, int] = (0, 0)

    def __post_init__(self):
        sizes = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("cumulative sizes must be strictly increasing")
        if any(not 0.0 <= q <= 1.0 for _, q in self.points):
            raise ValueError("window QBER outside [0, 1]")

    def __len__(self):
        return len(self.points)

    @property
    def values(self) -> np.ndarray:
        return np.array([q for _, q in self.points], dtype=np.float64)

    @property
    def partial_qber(self) -> float | None:
        bits, errs = self.partial
        return errs / bits if bits else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cumulative_bytes", "window_qber"])
        for size, q in self.points:
            w.writerow([size, repr(float(q))])
        return buf.getvalue()


def windowed_qber(error_flags, window_bytes: int = DEFAULT_WINDOW_BYTES) -> QberSeries:
    """Split the flag stream into windows of ``window_bytes`` key bytes."""
    if window_bytes < 1:
        raise ValueError("window_bytes must be positive")
    flags = np.asarray(error_flags, dtype=np.uint8).ravel() & 1
    w = window_bytes * 8
    full = flags.size // w
    counts = flags[: full * w].reshape(full, w).sum(axis=1, dtype=np.int64)
    points = [((i + 1) * window_bytes, int(c) / w) for i, c in enumerate(counts)]
    tail = flags[full * w :]
    return QberSeries(window_bytes, points, (int(tail.size), int(tail.sum())))


def stability_stats(series: QberSeries, region: tuple[int, int] | range | slice | None = None) -> tuple[float, float]:
    """Sample mean and sample standard deviation over a window range.

    ``region`` is a half-open (start, stop) index pair into the points;
    the full series when omitted. A single window has stddev 0.
    """
    vals = series.values
    if region is None:
        start, stop = 0, vals.size
    elif isinstance(region, (range, slice)):
        start, stop = region.start or 0, vals.size if region.stop is None else region.stop
    else:
        start, stop = region
    if not 0 <= start < stop <= vals.size:
        raise ValueError(f"region [{start}, {stop}) empty or outside 0..{vals.size}")
    sel = vals[start:stop]
    mean = float(sel.mean())
    std = float(sel.std(ddof=1)) if sel.size > 1 else 0.0
    return mean, std


def binomial_window_stddev(qber: float, window_bytes: int = DEFAULT_WINDOW_BYTES) -> float:
    """Standard deviation of a window's error fraction for i.i.d. errors."""
    return math.sqrt(qber * (1 - qber) / (window_bytes * 8))


def extrapolate_rate(bits: int, slots_simulated: int, pulse_rate_hz: float, duty_cycle: float = DEFAULT_DUTY_CYCLE) -> float:
    if slots_simulated < 1:
        raise ValueError("slots_simulated must be at least 1")
    if not 0 < duty_cycle <= 1:
        raise ValueError("duty_cycle must lie in (0, 1]")
    return bits / slots_simulated * pulse_rate_hz * duty_cycle


@dataclass
class SessionReport:
    sifted_bits: int
    verified_bits: int
    secret_bits: int
    mean_qber: float
    qber_stddev: float
    alarm_flag: bool
    extrapolated_sifted_rate_bps: float
    extrapolated_secret_rate_bps: float

    def __post_init__(self):
        if not self.secret_bits <= self.verified_bits <= self.sifted_bits:
            raise ValueError("need secret_bits <= verified_bits <= sifted_bits")
        if self.extrapolated_sifted_rate_bps < 0 or self.extrapolated_secret_rate_bps < 0:
            raise ValueError("rates must be non-negative")

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(f.name for f in fields(cls))

    def csv_line(self) -> str:
        vals = []
        for v in asdict(self).values():
            vals.append(str(int(v)) if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
        return ",".join(vals)


def build_report(
    sifted_bits: int,
    verified_bits: int,
    secret_bits: int,
    series: QberSeries,
    alarm: bool,
    slots: int,
    pulse_rate_hz: float,
    duty_cycle: float = DEFAULT_DUTY_CYCLE,
    fallback_qber: float = 0.0,
) -> SessionReport:
    """Summary over a run; QBER moments come from the full windows.

    With no full window the mean falls back to ``fallback_qber`` (the
    partial window if there is one) and the stddev is 0.
    """
    if len(series):
        mean, std = stability_stats(series)
    else:
        pq = series.partial_qber
        mean, std = (pq if pq is not None else fallback_qber), 0.0
    return SessionReport(
        sifted_bits=sifted_bits,
        verified_bits=verified_bits,
        secret_bits=secret_bits,
        mean_qber=mean,
        qber_stddev=std,
        alarm_flag=alarm,
        extrapolated_sifted_rate_bps=extrapolate_rate(sifted_bits, slots, pulse_rate_hz, duty_cycle),
        extrapolated_secret_rate_bps=extrapolate_rate(secret_bits, slots, pulse_rate_hz, duty_cycle),
    )
