"""Pulse-signal processing: peaks, heart rate, respiration from RSA, HRV.

All estimators here are invariant under ``a * x + b`` with ``a > 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels

HF_BAND = (0.15, 0.40)
LF_BAND = (0.04, 0.15)
IBI_RESAMPLE_HZ = 4.0
MAX_HR_BPM = 220.0


class InsufficientPeaks(ValueError):
    """Raised when a signal has too few beats for the requested estimate."""


@dataclass(frozen=True)
class PeakList:
    indices: np.ndarray
    fs: float
    # sub-sample peak positions (parabolic refinement), same length as indices
    positions: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.indices)

    @property
    def times(self) -> np.ndarray:
        pos = self.indices if self.positions is None else self.positions
        return np.asarray(pos, dtype=np.float64) / self.fs


@dataclass(frozen=True)
class Spectrum:
    frequencies: np.ndarray
    power: np.ndarray

    @property
    def df(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0]) if self.frequencies.size > 1 else 0.0

    def total_power(self) -> float:
        return float(self.power.sum() * self.df)

    def band_power(self, lo, hi, include_hi=False) -> float:
        f = self.frequencies
        sel = (f >= lo) & ((f <= hi) if include_hi else (f < hi))
        return float(self.power[sel].sum() * self.df)


def min_peak_distance(fs: float) -> int:
    return int(np.floor(fs * 60.0 / MAX_HR_BPM))


def find_peaks(signal, fs: float, min_distance: Optional[int] = None) -> PeakList:
    """Local maxima above the signal mean, thinned to a minimum spacing.

    Conflicts inside the minimum distance keep the taller peak. A constant
    signal yields an empty list.
    """
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.size < 2 * fs:
        raise ValueError(f"need at least {2 * fs:g} samples (2 s), got {x.size}")
    if min_distance is None:
        min_distance = min_peak_distance(fs)
    cand = kernels.local_maxima(x)
    cand = cand[x[cand] > x.mean()]
    kept = kernels.distance_filter(cand, x[cand], min_distance)
    return PeakList(np.asarray(kept, dtype=np.int64), float(fs), _refine(x, kept))


def _refine(x, idx):
    """Parabolic interpolation of each peak through its two neighbours."""
    pos = idx.astype(np.float64)
    inner = (idx > 0) & (idx < x.size - 1)
    i = idx[inner]
    y0, y1, y2 = x[i - 1], x[i], x[i + 1]
    den = y0 - 2 * y1 + y2
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(den < 0, 0.5 * (y0 - y2) / den, 0.0)
    pos[inner] += np.clip(off, -0.5, 0.5)
    return pos


def hr_from_peaks(peaks: PeakList) -> float:
    """Beats per minute from the first-to-last peak span."""
    n = len(peaks)
    if n < 2:
        raise InsufficientPeaks(f"need at least 2 peaks, got {n}")
    span = int(peaks.indices[-1] - peaks.indices[0])
    return 60.0 * peaks.fs * (n - 1) / span


def heart_rate(signal, fs: float) -> float:
    return hr_from_peaks(find_peaks(signal, fs))


def periodogram(x, fs: float, nfft: Optional[int] = None, detrend=True) -> Spectrum:
    """One-sided periodogram (no window) as a power density.

    Zero padding to ``nfft`` only samples the same periodogram more densely;
    ``total_power()`` still equals the variance of ``x``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if detrend:
        x = x - x.mean()
    nfft = n if nfft is None else max(int(nfft), n)
    spec = np.fft.rfft(x, nfft)
    p = (np.abs(spec) ** 2) / (fs * n)
    if nfft % 2 == 0:
        p[1:-1] *= 2
    else:
        p[1:] *= 2
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    return Spectrum(freqs, p)


def ibi_series(peaks: PeakList, resample_hz: float = IBI_RESAMPLE_HZ):
    """Inter-beat intervals (s) resampled to a uniform grid by linear interpolation.

    Each interval is placed at the time of the beat that closes it.
    """
    t = peaks.times
    if t.size < 3:
        raise InsufficientPeaks(f"need at least 3 peaks for an IBI series, got {t.size}")
    ibi = np.diff(t)
    tb = t[1:]
    grid = np.arange(tb[0], tb[-1] + 1e-9, 1.0 / resample_hz)
    if grid.size < 4:
        raise InsufficientPeaks("IBI series too short to resample")
    return grid, np.interp(grid, tb, ibi)


def ibi_spectrum(bvp, fs: float, resample_hz: float = IBI_RESAMPLE_HZ, df: float = 0.005):
    """Spectrum of the mean-removed, resampled IBI series plus that series."""
    x = np.asarray(bvp, dtype=np.float64).reshape(-1)
    if x.size < 8 * fs:
        raise InsufficientPeaks(f"need at least 8 s of signal, got {x.size / fs:.2f} s")
    peaks = find_peaks(x, fs)
    if len(peaks) < 6:
        raise InsufficientPeaks(f"need at least 6 peaks, got {len(peaks)}")
    _, ibi = ibi_series(peaks, resample_hz)
    nfft = max(ibi.size, int(np.ceil(resample_hz / df)))
    return periodogram(ibi, resample_hz, nfft=nfft), ibi


@dataclass(frozen=True)
class RespirationEstimate:
    rr: float
    peak_frequency: float
    # power of the natural-resolution bin at the peak over total IBI power (DC included)
    peak_power_fraction: float
    # relative amplitude of the in-band IBI oscillation
    modulation: float
    low_confidence: bool


def respiration_estimate(bvp, fs: float, band=HF_BAND, min_modulation: float = 0.005):
    spec, ibi = ibi_spectrum(bvp, fs)
    f = spec.frequencies
    sel = np.flatnonzero((f >= band[0]) & (f <= band[1]))
    k = sel[np.argmax(spec.power[sel])]
    natural_df = IBI_RESAMPLE_HZ / ibi.size
    peak_power = float(spec.power[k] * natural_df)
    total = float(np.mean(ibi**2))
    mean_ibi = float(np.mean(ibi))
    modulation = float(np.sqrt(2 * peak_power) / mean_ibi) if mean_ibi > 0 else 0.0
    return RespirationEstimate(
        rr=float(f[k] * 60.0),
        peak_frequency=float(f[k]),
        peak_power_fraction=peak_power / total if total > 0 else 0.0,
        modulation=modulation,
        low_confidence=bool(modulation < min_modulation),
    )


def rr_from_bvp(bvp, fs: float) -> float:
    """Breaths per minute at the HF peak of the IBI spectrum."""
    return respiration_estimate(bvp, fs).rr


def hrv_metrics(bvp, fs: float) -> Optional[dict]:
    """LFnu, HFnu and LF/HF of the IBI spectrum.

    Returns ``None`` when LF + HF is zero, i.e. below a relative amplitude of
    1e-6 of the mean interval (floating-point roundoff).
    """
    spec, ibi = ibi_spectrum(bvp, fs)
    lf = spec.band_power(*LF_BAND)
    hf = spec.band_power(*HF_BAND, include_hi=True)
    if lf + hf <= 1e-12 * float(np.mean(ibi)) ** 2:
        return None
    return {
        "LF": lf,
        "HF": hf,
        "LFnu": lf / (lf + hf),
        "HFnu": hf / (lf + hf),
        "LF_over_HF": lf / hf if hf > 0 else float("inf"),
    }


def pearson(a, b) -> Optional[float]:
    """Product-moment correlation; ``None`` if either input has zero variance."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two sequences of equal length >= 2")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    return float(np.clip((da * db).sum() / den, -1.0, 1.0))
