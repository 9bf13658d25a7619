"""
Microphone array layouts, the DOA class grid and far-field steering delays.

Angles are measured in the array plane relative to the array axis, in
degrees over [0, 180]. A wave "from 0 degrees" arrives from the positive
end of the axis (the end the last microphone sits on for a ULA built by
:func:`build_ula`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SOUND_SPEED = 343.0

_COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class ArrayGeometry:
    """
    Microphone positions of an array.

    Parameters
    ----------
    mic_positions : ndarray, shape (M, 3)
        Cartesian coordinates in meters.
    kind : {'uniform-linear', 'explicit'}
    inter_mic_distance : float, optional
        Spacing in meters, only meaningful for ``kind='uniform-linear'``.
    """

    mic_positions: np.ndarray
    kind: str = "explicit"
    inter_mic_distance: float | None = None

    def __post_init__(self):
        pos = np.array(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"mic_positions must have shape (M, 3), got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError("an array needs at least 2 microphones")
        if self.kind not in ("uniform-linear", "explicit"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.kind == "uniform-linear":
            if self.inter_mic_distance is None or self.inter_mic_distance <= 0:
                raise ValueError("uniform-linear geometry needs a positive inter_mic_distance")
            steps = np.diff(pos, axis=0)
            expected = np.array([self.inter_mic_distance, 0.0, 0.0])
            if not np.allclose(steps, expected, rtol=0, atol=1e-12):
                raise ValueError("uniform-linear positions must be equally spaced along x")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def aperture(self) -> float:
        return float(np.linalg.norm(self.mic_positions[-1] - self.mic_positions[0]))

    def is_collinear(self) -> bool:
        return _line_residual(self.mic_positions) < _COLLINEAR_TOL

    def axis(self) -> np.ndarray:
        """Unit vector along the array, pointing from the first to the last mic."""
        if not self.is_collinear():
            raise ValueError("geometry is not collinear; no array axis is defined")
        d = self.mic_positions[-1] - self.mic_positions[0]
        return d / np.linalg.norm(d)

    def translated(self, offset) -> "ArrayGeometry":
        """Same layout moved rigidly by ``offset`` (kind is preserved)."""
        return ArrayGeometry(self.mic_positions + np.asarray(offset, dtype=float),
                             self.kind, self.inter_mic_distance)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "inter_mic_distance": self.inter_mic_distance,
            "mic_positions": self.mic_positions.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        if "mic_positions" not in d:
            return build_ula(int(d["mic_count"]), float(d["spacing"]))
        return cls(np.asarray(d["mic_positions"], dtype=float), d.get("kind", "explicit"),
                   d.get("inter_mic_distance"))


def _line_residual(points: np.ndarray) -> float:
    centered = points - points.mean(axis=0)
    if not np.any(centered):
        return 0.0
    # distance of the points from their best-fit line
    _, s, _ = np.linalg.svd(centered, full_matrices=False)
    return float(np.sqrt(np.sum(s[1:] ** 2)))


@dataclass(frozen=True)
class DoaGrid:
    """Discretised DOA classes ``0, r, 2r, ..., 180`` degrees."""

    resolution_deg: float
    angles_deg: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        res = float(self.resolution_deg)
        if not res > 0:
            raise ValueError("grid resolution must be positive")
        n = 180.0 / res
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"resolution {res} does not divide 180 evenly")
        angles = np.arange(int(round(n)) + 1) * res
        angles.setflags(write=False)
        object.__setattr__(self, "resolution_deg", res)
        object.__setattr__(self, "angles_deg", angles)

    @property
    def class_count(self) -> int:
        return len(self.angles_deg)

    def __len__(self):
        return self.class_count


@dataclass(frozen=True)
class PerturbationSpec:
    """Per-microphone displacement vectors, shape (M, 3), in meters."""

    displacements: np.ndarray

    def __post_init__(self):
        d = np.array(self.displacements, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError(f"displacements must have shape (M, 3), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "displacements", d)


def build_ula(mic_count: int, spacing: float) -> ArrayGeometry:
    """
    Uniform linear array on the x-axis, centred at the origin.

    >>> build_ula(2, 1.0).mic_positions[:, 0]
    array([-0.5,  0.5])
    """
    if int(mic_count) != mic_count or mic_count < 2:
        raise ValueError("mic_count must be an integer >= 2")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    x = (np.arange(mic_count) - (mic_count - 1) / 2.0) * spacing
    pos = np.zeros((int(mic_count), 3))
    pos[:, 0] = x
    return ArrayGeometry(pos, "uniform-linear", float(spacing))


def build_grid(resolution: float) -> DoaGrid:
    return DoaGrid(resolution)


def class_of_angle(grid: DoaGrid, angle: float) -> int:
    """Index of the nearest grid angle; exact midpoints go to the lower index."""
    if not 0.0 <= angle <= 180.0:
        raise ValueError(f"angle {angle} outside [0, 180]")
    x = angle / grid.resolution_deg
    lo = int(np.floor(x))
    if x - lo > 0.5 + 1e-12:
        lo += 1
    return min(lo, grid.class_count - 1)


def farfield_delays(geom: ArrayGeometry, angle: float, sound_speed: float = SOUND_SPEED) -> np.ndarray:
    """
    Plane-wave arrival delays (seconds) of each mic relative to mic 0.

    A microphone further along the array axis hears a wave from 0 degrees
    earlier, so its delay is negative.
    """
    if not sound_speed > 0:
        raise ValueError("sound_speed must be positive")
    axis = geom.axis()
    proj = (geom.mic_positions - geom.mic_positions[0]) @ axis
    return -proj * np.cos(np.deg2rad(angle)) / sound_speed


def apply_perturbation(geom: ArrayGeometry, spec: PerturbationSpec) -> ArrayGeometry:
    if spec.displacements.shape[0] != geom.n_mics:
        raise ValueError(
            f"perturbation has {spec.displacements.shape[0]} rows for {geom.n_mics} microphones")
    return ArrayGeometry(geom.mic_positions + spec.displacements, "explicit")


def middle_mic_perturbation(geom: ArrayGeometry, shifts=(0.005, 0.003)) -> PerturbationSpec:
    """
    Move the two middle mics of a 4-element array in opposite directions
    along the axis: mic 1 by ``-shifts[0]``, mic 2 by ``+shifts[1]``.
    """
    if geom.n_mics != 4:
        raise ValueError("middle-mic perturbation is defined for 4-element arrays")
    axis = geom.axis()
    d = np.zeros((4, 3))
    d[1] = -shifts[0] * axis
    d[2] = shifts[1] * axis
    return PerturbationSpec(d)
