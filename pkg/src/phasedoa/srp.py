"""
Frame-wise SRP-PHAT over the DOA grid with far-field steering.

For every class the PHAT-whitened spectra are phase-aligned with the
class's plane-wave delays and summed over microphones; the score is the
power of that sum added up over frequency bins (DC excluded).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SOUND_SPEED, ArrayGeometry, DoaGrid, farfield_delays
from .stft import Spectrogram, StftParams

PHAT_FLOOR = 1e-12


@dataclass(frozen=True)
class SteeringTable:
    """
    Plane-wave phasors ``exp(-j 2 pi f_k tau_m(theta_i))``, shape (I, M, K).

    ``bins`` marks the frequency bins that take part in scoring.
    """

    phasors: np.ndarray
    sample_rate: float
    grid: DoaGrid
    geometry: ArrayGeometry
    bins: np.ndarray

    @property
    def shape(self):
        return self.phasors.shape


def build_steering_table(geom: ArrayGeometry, grid: DoaGrid, params: StftParams = StftParams(),
                         sample_rate: float = 16000, sound_speed: float = SOUND_SPEED,
                         min_bin: int = 1, max_bin: int | None = None) -> SteeringTable:
    freqs = params.bin_frequencies(sample_rate)
    tau = np.stack([farfield_delays(geom, a, sound_speed) for a in grid.angles_deg])
    phasors = np.exp(-2j * np.pi * tau[:, :, None] * freqs[None, None, :])
    phasors[:, :, 0] = 1.0
    K = params.bin_count
    bins = np.zeros(K, dtype=bool)
    bins[max(min_bin, 1):(K if max_bin is None else max_bin + 1)] = True
    return SteeringTable(phasors, float(sample_rate), grid, geom, bins)


def phat_whiten(coefficients) -> np.ndarray:
    """Unit-modulus coefficients; magnitudes below 1e-12 become 0."""
    c = np.asarray(coefficients)
    mag = np.abs(c)
    out = np.zeros_like(c, dtype=np.complex128)
    ok = mag >= PHAT_FLOOR
    out[ok] = c[ok] / mag[ok]
    return out


def srp_phat_scores(coefficients, table: SteeringTable, chunk: int = 256) -> np.ndarray:
    """
    Scores for a batch of frames.

    Parameters
    ----------
    coefficients : ndarray, shape (M, N, K)
        STFT coefficients of N frames.

    Returns
    -------
    ndarray, shape (N, I)
    """
    Y = np.asarray(coefficients)
    I, M, K = table.phasors.shape
    if Y.shape[0] != M or Y.shape[2] != K:
        raise ValueError(f"spectrum (M={Y.shape[0]}, K={Y.shape[2]}) does not match table (M={M}, K={K})")
    A = np.conj(table.phasors[:, :, table.bins])
    W = phat_whiten(Y[:, :, table.bins])
    out = np.empty((Y.shape[1], I))
    for s in range(0, Y.shape[1], chunk):
        aligned = np.einsum("mnk,imk->nik", W[:, s:s + chunk], A, optimize=True)
        out[s:s + chunk] = np.sum(aligned.real ** 2 + aligned.imag ** 2, axis=-1)
    return out


def srp_phat_frame(spec: Spectrogram, n: int, table: SteeringTable) -> np.ndarray:
    if not 0 <= n < spec.n_frames:
        raise IndexError(f"frame {n} out of range [0, {spec.n_frames})")
    return srp_phat_scores(spec.coefficients[:, n:n + 1, :], table)[0]


def normalize_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum(axis=-1, keepdims=True)
    n = s.shape[-1]
    return np.divide(s, total, out=np.full_like(s, 1.0 / n), where=total > 0)


def srp_phat_estimate(spec: Spectrogram, n: int, table: SteeringTable) -> tuple[float, np.ndarray]:
    """Argmax angle (ties to the lower class) and the scores normalised to sum to 1."""
    scores = srp_phat_frame(spec, n, table)
    return float(table.grid.angles_deg[int(np.argmax(scores))]), normalize_scores(scores)


def srp_phat_scores_from_phase(phase_maps, table: SteeringTable, chunk: int = 256) -> np.ndarray:
    """
    Scores from stored phase maps ``(N, M, K)``.

    PHAT whitening keeps only the phase, so ``exp(j * phase)`` carries the
    same information as the spectrum (apart from exactly-zero bins).
    """
    phi = np.asarray(phase_maps, dtype=np.float64)
    return srp_phat_scores(np.exp(1j * phi).transpose(1, 0, 2), table, chunk)
