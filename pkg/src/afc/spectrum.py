"""Periodograms and dominant-frequency detection for force signals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

MIN_SAMPLES = 64
MIN_PROMINENCE = 30.0
LOBE_BINS = 3


class SpectrumError(ValueError):
    pass


class NoPeakError(SpectrumError):
    pass


@dataclass
class SpectrumResult:
    frequencies: np.ndarray
    power: np.ndarray           # untapered, sums to the signal variance
    tapered_power: np.ndarray   # Hann window, used for peak picking
    peak_frequency: float
    strouhal: float
    prominence: float
    dominance: float


def periodogram(x, dt: float, window: np.ndarray | None = None):
    """One-sided power of the mean-removed signal.

    Without a window the bins sum to the population variance exactly
    (Parseval).  With a window the power is normalised by ``sum(w^2)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    y = x - x.mean()
    if window is None:
        spec = np.fft.rfft(y)
        p = np.abs(spec) ** 2 / (n * n)
    else:
        spec = np.fft.rfft(y * window)
        p = np.abs(spec) ** 2 / (n * np.sum(window**2))
    p[1:] *= 2.0
    if n % 2 == 0:
        p[-1] /= 2.0
    return np.fft.rfftfreq(n, dt), p


def uniform_step(t) -> float:
    t = np.asarray(t, dtype=float)
    if t.size < 2:
        raise SpectrumError("need at least two timestamps")
    d = np.diff(t)
    dt = (t[-1] - t[0]) / (t.size - 1)
    if dt <= 0 or np.max(np.abs(d - dt)) > 1e-6 * dt:
        raise SpectrumError("timestamps are not uniformly spaced")
    return dt


def analyse(t, x, chord: float = 1.0, u_inf: float = 1.0,
            min_prominence: float = MIN_PROMINENCE) -> SpectrumResult:
    """Peak frequency and Strouhal number of ``x`` sampled at times ``t``.

    Prominence is the tapered peak power over the median tapered power.
    Dominance is the peak over the strongest other local maximum outside
    the main lobe (inf if there is none).
    """
    x = np.asarray(x, dtype=float)
    if x.size < MIN_SAMPLES:
        raise SpectrumError(f"signal has {x.size} samples, need at least {MIN_SAMPLES}")
    dt = uniform_step(t)
    if not np.all(np.isfinite(x)):
        raise SpectrumError("signal contains non-finite samples")
    freqs, power = periodogram(x, dt)
    _, tp = periodogram(x, dt, np.hanning(x.size))
    body = tp[1:]
    floor = float(np.median(body))
    k = int(np.argmax(body)) + 1
    peak = float(tp[k])
    if peak <= 0.0 or (floor > 0 and peak / floor < min_prominence):
        raise NoPeakError(f"no spectral peak above the noise floor (prominence {peak / floor if floor else 0:.1f})")
    prominence = math.inf if floor == 0 else peak / floor

    # Gaussian (log-parabolic) refinement between neighbouring bins
    shift = 0.0
    if 1 < k < tp.size - 1 and min(tp[k - 1], tp[k + 1]) > 0:
        a, b, c = np.log(tp[k - 1]), np.log(tp[k]), np.log(tp[k + 1])
        den = a - 2 * b + c
        if den < 0:
            shift = 0.5 * (a - c) / den
    f_peak = (k + shift) * (freqs[1] - freqs[0])

    local = (tp[1:-1] > tp[:-2]) & (tp[1:-1] >= tp[2:])
    idx = np.nonzero(local)[0] + 1
    idx = idx[np.abs(idx - k) > LOBE_BINS]
    other = float(tp[idx].max()) if idx.size else 0.0
    dominance = math.inf if other == 0 else peak / other
    return SpectrumResult(freqs, power, tp, f_peak, f_peak * chord / u_inf, prominence, dominance)


def read_column(path, column: str, time_column: str = "t"):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SpectrumError(f"{path} has no data rows")
    for c in (column, time_column):
        if c not in rows[0]:
            raise SpectrumError(f"column {c!r} not in {path}")
    try:
        t = np.array([float(r[time_column]) for r in rows])
        x = np.array([float(r[column]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise SpectrumError(f"non-numeric value in {path}: {exc}") from exc
    return t, x


def write_spectrum_csv(path, result: SpectrumResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency", "power", "tapered_power"])
        for row in zip(result.frequencies, result.power, result.tapered_power):
            w.writerow([repr(float(v)) for v in row])
