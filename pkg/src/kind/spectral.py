"""Spectral diagnostics: FFT, integrated rms curve, mode-step detection.

Amplitude convention: one-sided, normalized by the coherent gain of the
window over the original (pre-padding) samples, so a bin-centered sine of
amplitude A reports A at its bin under the rectangular window. Inputs whose
length is not a power of two are zero-padded up to the next one; the
integrated rms normalization accounts for the padding so its final value
still equals the time-domain RMS of the mean-removed segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .timeseries import TimeSeries


@dataclass
class Spectrum:
    frequencies: np.ndarray     # Hz, 0 .. Nyquist inclusive
    magnitudes: np.ndarray      # amplitude per bin
    sample_rate: float
    window_length: int          # original segment length before padding


@dataclass
class IntegratedRmsCurve:
    frequencies: np.ndarray
    cumulative_rms: np.ndarray  # Hz, monotonically non-decreasing


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def fft_complex(values: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT. Length must be a power of 2."""
    x = np.asarray(values, dtype=np.complex128).copy()
    n = len(x)
    if n == 0 or n & (n - 1):
        raise ContractError(f"fft_complex needs a power-of-two length, got {n}")
    # bit-reversal permutation
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        if i < j:
            x[i], x[j] = x[j], x[i]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = x.reshape(-1, size)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * twiddle
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        size *= 2
    return x


def fft(segment: TimeSeries, window: str = "none") -> Spectrum:
    """One-sided amplitude spectrum of a series segment."""
    values = np.asarray(segment.values, dtype=np.float64)
    length = len(values)
    if length == 0:
        raise ContractError("cannot transform an empty segment")
    if window == "hann":
        w = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(length) / length))
    elif window == "none":
        w = np.ones(length)
    else:
        raise ContractError(f"unknown window {window!r} (use none or hann)")
    coherent_gain = w.sum()
    padded = np.zeros(max(2, _next_pow2(length)))
    padded[:length] = values * w
    spec = fft_complex(padded)
    n = len(padded)
    half = n // 2
    mags = np.abs(spec[: half + 1])
    mags[1:half] *= 2.0
    mags /= coherent_gain
    freqs = np.arange(half + 1) * segment.sample_rate / n
    return Spectrum(freqs, mags, segment.sample_rate, length)


def integrated_rms(spectrum: Spectrum) -> IntegratedRmsCurve:
    """Cumulative square-root of spectral power versus frequency.

    DC is excluded: the curve integrates fluctuation power only, and its
    final value equals the time-domain RMS of the mean-removed segment
    (exactly so for the rectangular window).
    """
    n = 2 * (len(spectrum.frequencies) - 1)
    scale = spectrum.window_length / n  # undo zero-padding dilution
    a = spectrum.magnitudes
    power = np.zeros_like(a)
    power[1:-1] = scale * a[1:-1] ** 2 / 2.0
    power[-1] = scale * a[-1] ** 2  # Nyquist bin appears once
    cum = np.sqrt(np.cumsum(power))
    cum[0] = 0.0
    return IntegratedRmsCurve(spectrum.frequencies.copy(), cum)


def integrated_rms_of(segment: TimeSeries) -> tuple[Spectrum, IntegratedRmsCurve]:
    """Mean-remove, transform with the rectangular window, integrate."""
    centered = TimeSeries(segment.sample_rate,
                          segment.values - segment.values.mean())
    spec = fft(centered, window="none")
    return spec, integrated_rms(spec)


def detect_steps(curve: IntegratedRmsCurve,
                 min_fraction: float = 0.05) -> list[tuple[float, float]]:
    """Frequencies where the curve jumps by more than min_fraction of its
    final value; jumps within 2 bins of each other are merged."""
    if not (0.0 < min_fraction < 1.0):
        raise ContractError(f"min_fraction must be in (0, 1), got {min_fraction}")
    total = curve.cumulative_rms[-1]
    if total <= 0.0:
        return []
    jumps = np.diff(curve.cumulative_rms)
    threshold = min_fraction * total
    hits = np.nonzero(jumps > threshold)[0]
    steps: list[tuple[float, float]] = []
    i = 0
    while i < len(hits):
        j = i
        while j + 1 < len(hits) and hits[j + 1] - hits[j] <= 2:
            j += 1
        cluster = hits[i:j + 1]
        peak = cluster[np.argmax(jumps[cluster])]
        steps.append((float(curve.frequencies[peak + 1]),
                      float(jumps[cluster].sum())))
        i = j + 1
    return steps


def write_spectrum_csv(path, spectrum: Spectrum) -> None:
    lines = ["freq_hz,magnitude"]
    for f, m in zip(spectrum.frequencies, spectrum.magnitudes):
        lines.append(f"{f!r},{m!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_curve_csv(path, curve: IntegratedRmsCurve) -> None:
    lines = ["freq_hz,cum_rms_hz"]
    for f, c in zip(curve.frequencies, curve.cumulative_rms):
        lines.append(f"{f!r},{c!r}")
    Path(path).write_text("\n".join(lines) + "\n")
