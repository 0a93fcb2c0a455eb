"""Dominant-period detection from the channel- and instance-averaged amplitude spectrum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, PeriodDetectionError

MIN_LENGTH = 9
MIN_WINDOW = 3
NOISE_FLOOR = 1e-3


@dataclass(frozen=True)
class Spectrum:
    amplitudes: np.ndarray  # length L//2 + 1, index = frequency (cycles per series)
    length: int


@dataclass(frozen=True)
class PeriodSet:
    frequencies: tuple[int, ...]
    amplitudes: tuple[float, ...]
    windows: tuple[int, ...]
    length: int

    @property
    def k(self) -> int:
        return len(self.windows)

    def rows(self):
        """(frequency, amplitude, window) triples in window order."""
        return list(zip(self.frequencies, self.amplitudes, self.windows))


def amplitude_spectrum(values) -> Spectrum:
    """Mean magnitude of the real DFT along time, over channels and instances.

    ``values`` is (N, L, C), (L, C) or (L,).
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DataError(f"expected (N, L, C) values, got shape {x.shape}")
    L = x.shape[1]
    if L < MIN_LENGTH:
        raise DataError(
            f"series length {L} < {MIN_LENGTH}: too short for period detection; use fixed windows"
        )
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite values in input")
    amp = np.abs(np.fft.rfft(x, axis=1))
    return Spectrum(amplitudes=amp.mean(axis=(0, 2)), length=L)


def top_k_periods(spectrum: Spectrum, k: int) -> PeriodSet:
    """The ``k`` strongest frequencies in [1, L//3] mapped to windows ceil(L/f).

    DC is excluded, bins under ``NOISE_FLOOR`` times the largest non-DC
    amplitude are ineligible, amplitude ties go to the lower frequency and
    windows that collide after the ceiling collapse into one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    L = spectrum.length
    hi = L // 3
    amp = np.asarray(spectrum.amplitudes, dtype=np.float64)
    fallback = max(MIN_WINDOW, int(round(L / 4)))
    band = amp[1 : hi + 1]
    peak = float(amp[1:].max()) if amp.size > 1 else 0.0
    if peak <= 1e-9 * max(1.0, float(amp[0])) or band.size == 0:
        raise PeriodDetectionError("no periodic component found", fallback)
    freqs = np.arange(1, hi + 1)
    eligible = band >= NOISE_FLOOR * peak
    # stable sort on -amplitude keeps lower frequencies first on ties
    order = np.argsort(-band, kind="stable")
    picked: list[tuple[int, float, int]] = []
    seen: set[int] = set()
    for idx in order:
        if len(picked) == k:
            break
        if not eligible[idx]:
            continue
        f = int(freqs[idx])
        w = math.ceil(L / f)
        if w < MIN_WINDOW or w > L or w in seen:
            continue
        seen.add(w)
        picked.append((f, float(band[idx]), w))
    if not picked:
        raise PeriodDetectionError("no eligible frequency in [1, L/3]", fallback)
    picked.sort(key=lambda r: -r[2])
    fs, amps, ws = zip(*picked)
    return PeriodSet(frequencies=tuple(fs), amplitudes=tuple(amps), windows=tuple(ws), length=L)


def detect_periods(values, k: int = 3) -> PeriodSet:
    return top_k_periods(amplitude_spectrum(values), k)


def fixed_windows(windows, length: int) -> PeriodSet:
    """Wrap user-provided window sizes as a PeriodSet (no frequency information)."""
    ws = sorted({int(w) for w in windows}, reverse=True)
    if not ws:
        raise ValueError("at least one window is required")
    if ws[-1] < 1:
        raise ValueError("windows must be positive")
    return PeriodSet(
        frequencies=tuple(math.ceil(length / w) for w in ws),
        amplitudes=tuple(float("nan") for _ in ws),
        windows=tuple(ws),
        length=length,
    )
