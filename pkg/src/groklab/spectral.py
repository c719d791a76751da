"""Spectral summaries of a loss series: detrending, periodogram, moments, Hjorth parameters."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

MIN_LENGTH = 8


@dataclass
class Periodogram:
    omega: np.ndarray  # angular frequency 2*pi*k/N
    energy: np.ndarray


@dataclass
class SpectralSignature:
    activity: float
    mobility: float | None
    complexity: float | None
    m0: float
    m2: float
    m4: float
    window: tuple[int, int]
    cutoff: float

    @property
    def defined(self) -> bool:
        return self.mobility is not None and self.complexity is not None


def _series(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    return x


def detrend_lowpass(x, cutoff: float) -> np.ndarray:
    """Return x minus its low-frequency content.

    ``cutoff`` is in cycles per sample; every Fourier component below it (DC
    included) is treated as trend. The endpoint chord is removed first and
    the remainder is oddly extended before masking, so ramps and slow decays
    leave no wrap-around edge behind.
    """
    x = _series(x)
    n = x.size
    if n < MIN_LENGTH:
        raise ValueError(f"series too short for detrending ({n} < {MIN_LENGTH} samples)")
    if not 0.0 < cutoff < 0.5:
        raise ValueError(f"cutoff must lie in (0, 0.5) cycles/sample, got {cutoff}")
    chord = x[0] + (x[-1] - x[0]) * np.arange(n) / (n - 1)
    resid = x - chord
    ext = np.concatenate([resid, -resid[::-1]])
    spec = np.fft.rfft(ext)
    freqs = np.fft.rfftfreq(ext.size)
    spec[freqs < cutoff] = 0.0
    out = np.fft.irfft(spec, n=ext.size)[:n]
    return out - out.mean()


def periodogram(x) -> Periodogram:
    """One-sided energy spectrum normalized so the energies sum to sum(x**2)."""
    x = _series(x)
    n = x.size
    if n < 2:
        raise ValueError("periodogram needs at least 2 samples")
    X = np.fft.rfft(x)
    energy = np.abs(X) ** 2 / n
    # fold the negative frequencies in; DC and (even n) Nyquist have no mirror
    if n % 2 == 0:
        energy[1:-1] *= 2.0
    else:
        energy[1:] *= 2.0
    omega = 2.0 * np.pi * np.arange(energy.size) / n
    return Periodogram(omega, energy)


def moment(pg: Periodogram, order: int) -> float:
    return float(np.sum(pg.omega**order * pg.energy))


def hjorth(x, cutoff: float = 0.01, window: tuple[int, int] | None = None) -> SpectralSignature:
    x = _series(x)
    d = detrend_lowpass(x, cutoff)
    pg = periodogram(d)
    m0, m2, m4 = (moment(pg, k) for k in (0, 2, 4))
    mobility = math.sqrt(m2 / m0) if m0 > 0 else None
    complexity = math.sqrt(m4 / m2) if m2 > 0 else None
    if mobility is None:
        complexity = None
    return SpectralSignature(m0, mobility, complexity, m0, m2, m4, window or (0, x.size), cutoff)


def window_signature(series, window=(0, 400), cutoff: float = 0.01, log_loss: bool = False) -> SpectralSignature:
    lo, hi = window
    series = np.asarray(series, dtype=np.float64)
    if lo < 0 or hi <= lo:
        raise ValueError(f"invalid window {window}")
    if series.size < hi:
        raise ValueError(f"series has {series.size} samples, window needs {hi}")
    seg = series[lo:hi]
    if log_loss:
        if np.any(seg <= 0):
            raise ValueError("log-loss transform needs positive losses")
        seg = np.log(seg)
    return hjorth(seg, cutoff, (lo, hi))


def grok_score(trace, window=(0, 400), cutoff: float = 0.01, log_loss: bool = False) -> float:
    """Activity of the detrended training loss inside ``window``."""
    losses = trace.train_loss if hasattr(trace, "train_loss") else trace
    return window_signature(losses, window, cutoff, log_loss).activity


def write_spectral_csv(path, signatures) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "window_end", "cutoff", "activity", "mobility", "complexity"])
        for s in signatures:
            w.writerow([s.window[0], s.window[1], repr(s.cutoff), repr(s.activity),
                        "" if s.mobility is None else repr(s.mobility),
                        "" if s.complexity is None else repr(s.complexity)])


def write_periodogram_csv(path, pg: Periodogram) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["omega", "energy"])
        for o, e in zip(pg.omega, pg.energy):
            w.writerow([repr(float(o)), repr(float(e))])
