"""Triangular auditory filter banks and the white-noise regression task."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream

FAMILIES = ("bark", "mel", "erb")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hz_to_bark(f):
    # Traunmüller (1990)
    f = np.asarray(f, dtype=np.float64)
    return 26.81 * f / (1960.0 + f) - 0.53


def bark_to_hz(z):
    z = np.asarray(z, dtype=np.float64)
    return 1960.0 * (z + 0.53) / (26.28 - z)


def hz_to_erb(f):
    # Glasberg & Moore ERB-rate
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


_WARPS = {
    "mel": (hz_to_mel, mel_to_hz),
    "bark": (hz_to_bark, bark_to_hz),
    "erb": (hz_to_erb, erb_to_hz),
}


@dataclass(frozen=True)
class FilterBankSpec:
    family: str = "bark"
    n_filters: int = 32
    fft_size: int = 512
    sample_rate: float = 16000.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown filter bank family {self.family!r}; expected one of {FAMILIES}")
        if self.n_filters < 2:
            raise ValueError(f"n_filters must be at least 2, got {self.n_filters}")
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.bins) * self.sample_rate / self.fft_size


def band_edges(spec: FilterBankSpec) -> np.ndarray:
    """``n_filters + 2`` frequencies (Hz), equally spaced on the warped scale."""
    fwd, inv = _WARPS[spec.family]
    lo, hi = fwd(0.0), fwd(spec.sample_rate / 2.0)
    edges = inv(np.linspace(lo, hi, spec.n_filters + 2))
    edges[0], edges[-1] = 0.0, spec.sample_rate / 2.0
    return edges


def center_frequencies(spec: FilterBankSpec) -> np.ndarray:
    return band_edges(spec)[1:-1]


def build_filterbank(spec: FilterBankSpec) -> np.ndarray:
    """(bins, n_filters) matrix of peak-normalized triangular filters."""
    edges = band_edges(spec)
    f = spec.bin_frequencies()[:, None]
    left, center, right = edges[:-2], edges[1:-1], edges[2:]
    rising = (f - left) / (center - left)
    falling = (right - f) / (right - center)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    peaks = fb.max(axis=0)
    empty = np.flatnonzero(peaks <= 0.0)
    if empty.size:
        raise ValueError(
            f"{spec.n_filters} {spec.family} filters are too narrow for {spec.bins} bins; "
            f"filters {empty.tolist()} cover no bin"
        )
    return fb / peaks


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def magnitude_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """|rfft| of Hann-windowed frames, shape (n_frames, fft_size // 2 + 1)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[-1] != fft_size:
        raise ValueError(f"frames have length {frames.shape[-1]}, expected {fft_size}")
    return np.abs(np.fft.rfft(frames * hann(fft_size), axis=-1))


def white_noise_spectrum(rng: RngStream, spec: FilterBankSpec, n_frames: int) -> np.ndarray:
    if n_frames < 1:
        raise ValueError(f"n_frames must be positive, got {n_frames}")
    return magnitude_spectrum(rng.normal((n_frames, spec.fft_size)), spec.fft_size)


def overparam_factor(capacity: float, min_capacity: float) -> float:
    """Network capacity divided by the minimum capacity the task needs."""
    if capacity <= 0 or min_capacity <= 0:
        raise ValueError(f"capacities must be positive, got {capacity} and {min_capacity}")
    return capacity / min_capacity


class FilterBankTask:
    """Batches of white-noise magnitude spectra and their filtered targets.

    Batch ``step`` is a pure function of ``(rng, step)``.
    """

    def __init__(self, spec: FilterBankSpec, rng: RngStream, batch_frames: int = 32):
        self.spec = spec
        self.matrix = build_filterbank(spec)
        self.rng = rng.child("filterbank-data")
        self.batch_frames = batch_frames

    def __call__(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        x = white_noise_spectrum(self.rng.at(step), self.spec, self.batch_frames)
        return x, x @ self.matrix


def write_filterbank_csv(matrix: np.ndarray, path) -> None:
    """Bins as rows, one column per filter."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin"] + [f"filter_{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(v)) for v in row])
