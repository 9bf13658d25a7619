"""Framing, windowing, one-sided DFT and phase-map extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class StftParams:
    dft_length: int = 256
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        n = self.dft_length
        if n < 2 or n & (n - 1):
            raise ValueError(f"dft_length must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError("hop must be in (0, dft_length]")
        if self.window not in ("hann", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def bin_count(self) -> int:
        return self.dft_length // 2 + 1

    def window_samples(self) -> np.ndarray:
        if self.window == "rectangular":
            return np.ones(self.dft_length)
        # periodic Hann, sums to a constant at 50% overlap
        return get_window("hann", self.dft_length, fftbins=True)

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.dft_length:
            return 0
        return (n_samples - self.dft_length) // self.hop + 1

    def bin_frequencies(self, sample_rate: float) -> np.ndarray:
        return np.arange(self.bin_count) * sample_rate / self.dft_length

    def to_dict(self) -> dict:
        return {"dft_length": self.dft_length, "hop": self.hop, "window": self.window}


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT coefficients indexed ``(mic, frame, bin)``."""

    coefficients: np.ndarray
    params: StftParams

    @property
    def n_mics(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[1]

    @property
    def bin_count(self) -> int:
        return self.coefficients.shape[2]


def forward_dft(frame) -> np.ndarray:
    """One-sided, unnormalised DFT of a real frame whose length is a power of two."""
    x = np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    if n < 2 or n & (n - 1):
        raise ValueError(f"frame length must be a power of two, got {n}")
    return np.fft.rfft(x)


def frames(signals, params: StftParams) -> np.ndarray:
    """Windowed frames, shape ``(M, N, dft_length)``."""
    x = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    n = params.frame_count(x.shape[1])
    if n == 0:
        return np.zeros((x.shape[0], 0, params.dft_length))
    view = np.lib.stride_tricks.sliding_window_view(x, params.dft_length, axis=1)
    return view[:, ::params.hop][:, :n] * params.window_samples()


def stft(signals, params: StftParams = StftParams()) -> Spectrogram:
    """
    STFT of each channel.

    Parameters
    ----------
    signals : array_like, shape (M, L) or sequence of equal-length channels
    params : StftParams

    Returns
    -------
    Spectrogram
        ``floor((L - N_f) / hop) + 1`` frames of ``N_f / 2 + 1`` bins.
    """
    if not isinstance(signals, np.ndarray):
        lengths = {len(s) for s in signals}
        if len(lengths) > 1:
            raise ValueError(f"channel lengths differ: {sorted(lengths)}")
    x = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if x.shape[1] < params.dft_length:
        raise ValueError(f"signals have {x.shape[1]} samples, fewer than one frame of {params.dft_length}")
    return Spectrogram(np.fft.rfft(frames(x, params), axis=-1), params)


def wrapped_phase(coefficients) -> np.ndarray:
    """Four-quadrant phase in (-pi, pi]; exact zeros map to 0."""
    c = np.asarray(coefficients)
    ph = np.angle(c)
    ph[ph == -np.pi] = np.pi
    ph[c == 0] = 0.0
    return ph


def phase_map(spec: Spectrogram, n: int) -> np.ndarray:
    """M x K phase matrix of frame ``n``."""
    if not 0 <= n < spec.n_frames:
        raise IndexError(f"frame {n} out of range [0, {spec.n_frames})")
    return wrapped_phase(spec.coefficients[:, n, :])


def phase_maps(spec: Spectrogram) -> np.ndarray:
    """All phase maps at once, shape ``(N, M, K)``."""
    return np.ascontiguousarray(wrapped_phase(spec.coefficients).transpose(1, 0, 2))
