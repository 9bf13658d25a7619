"""
Shoebox room impulse responses by the image-source method.

Reflections are modelled with the Allen-Berkley image lattice, uniform
wall reflectivity obtained from RT60 via Sabine's formula, and fractional
delays realised with an 81-tap Hann-windowed sinc.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from .geometry import SOUND_SPEED, ArrayGeometry

SINC_TAPS = 81
IMAGE_CUTOFF = 1e-5
WALL_MARGIN = 0.1


class InfeasibleRt60Error(ValueError):
    """The requested RT60 needs walls absorbing more than all incident energy."""


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple
    rt60: float
    sample_rate: int = 16000
    name: str = ""

    def __post_init__(self):
        dims = tuple(float(x) for x in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dimensions must be 3 positive extents, got {self.dimensions}")
        if self.rt60 < 0:
            raise ValueError("rt60 must be non-negative")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "dimensions", dims)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    def default_length(self) -> int:
        return int(np.ceil(1.2 * self.rt60 * self.sample_rate))

    def contains(self, point, margin: float = WALL_MARGIN) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= margin) and np.all(p <= np.asarray(self.dimensions) - margin))

    def to_dict(self) -> dict:
        return {"name": self.name, "dimensions": list(self.dimensions), "rt60": self.rt60,
                "sample_rate": self.sample_rate}

    @classmethod
    def from_dict(cls, d: dict, sample_rate: int | None = None) -> "RoomSpec":
        return cls(tuple(d["dimensions"]), float(d["rt60"]),
                   int(d.get("sample_rate", sample_rate or 16000)), d.get("name", ""))


@dataclass(frozen=True)
class Rir:
    samples: np.ndarray
    sample_rate: int
    source_mic_distance: float

    def __post_init__(self):
        if len(self.samples) == 0 or not np.all(np.isfinite(self.samples)):
            raise ValueError("RIR must be non-empty and finite")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class Placement:
    """Array centre in the room plus the source's angle and range from it."""

    array_center: tuple
    source_angle: float
    source_distance: float

    def source_position(self, geom: ArrayGeometry | None = None) -> np.ndarray:
        axis = np.array([1.0, 0.0, 0.0]) if geom is None else geom.axis()
        # the source lies in the horizontal plane, on the +y side of the axis
        normal = np.cross([0.0, 0.0, 1.0], axis)
        normal /= np.linalg.norm(normal)
        th = np.deg2rad(self.source_angle)
        direction = np.cos(th) * axis + np.sin(th) * normal
        return np.asarray(self.array_center, dtype=float) + self.source_distance * direction


def rt60_to_reflection(room: RoomSpec) -> np.ndarray:
    """
    Reflection coefficient of each of the six walls for the room's RT60.

    Uses Sabine's absorption ``a = 0.161 V / (S * rt60)`` and
    ``beta = sqrt(1 - a)``; an infinite RT60 gives lossless walls.
    """
    if not room.rt60 > 0:
        raise InfeasibleRt60Error("rt60 must be positive to derive a reflection coefficient")
    alpha = 0.161 * room.volume / (room.surface * room.rt60)
    if alpha >= 1.0:
        raise InfeasibleRt60Error(
            f"rt60={room.rt60} s needs absorption {alpha:.3f} >= 1 in a "
            f"{'x'.join(f'{d:g}' for d in room.dimensions)} m room")
    return np.full(6, np.sqrt(1.0 - alpha))


def image_sources(room: RoomSpec, source, max_order: int | None = None,
                  max_distance: float | None = None, mic=None):
    """
    Enumerate image sources of ``source``.

    Returns ``(positions, orders)`` where ``orders`` is the number of wall
    bounces of each image. Either ``max_order`` or ``max_distance`` (from
    ``mic``) must bound the lattice.
    """
    L = np.asarray(room.dimensions)
    s = np.asarray(source, dtype=float)
    if max_order is None and max_distance is None:
        raise ValueError("need max_order or max_distance to bound the image lattice")
    if max_distance is not None:
        n_max = np.ceil(max_distance / (2 * L)).astype(int) + 1
    else:
        n_max = np.full(3, max_order // 2 + 1)
    if max_order is not None:
        n_max = np.minimum(n_max, max_order // 2 + 1)

    per_axis = []
    for ax in range(3):
        n = np.arange(-n_max[ax], n_max[ax] + 1)
        nn, uu = np.meshgrid(n, [0, 1], indexing="ij")
        nn, uu = nn.ravel(), uu.ravel()
        coord = (1 - 2 * uu) * s[ax] + 2 * nn * L[ax]
        order = np.abs(nn - uu) + np.abs(nn)
        per_axis.append((coord, order))

    (cx, ox), (cy, oy), (cz, oz) = per_axis
    X, Y, Z = np.meshgrid(cx, cy, cz, indexing="ij")
    OX, OY, OZ = np.meshgrid(ox, oy, oz, indexing="ij")
    pos = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    orders = (OX + OY + OZ).ravel()
    keep = np.ones(len(orders), dtype=bool)
    if max_order is not None:
        keep &= orders <= max_order
    if max_distance is not None:
        keep &= np.linalg.norm(pos - np.asarray(mic, dtype=float), axis=1) <= max_distance
    return pos[keep], orders[keep]


def _fractional_pulses(delays: np.ndarray, gains: np.ndarray, length: int) -> np.ndarray:
    half = SINC_TAPS // 2
    centre = np.rint(delays).astype(np.int64)
    taps = np.arange(-half, half + 1)
    idx = centre[:, None] + taps[None, :]
    x = idx - delays[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * x / SINC_TAPS))
    kernel = window * np.sinc(x)
    # unit energy per pulse: the bare windowed sinc loses up to 2% at half-sample offsets
    kernel /= np.sqrt(np.sum(kernel ** 2, axis=1, keepdims=True))
    vals = gains[:, None] * kernel
    ok = (idx >= 0) & (idx < length)
    return np.bincount(idx[ok], weights=vals[ok], minlength=length)[:length]


def simulate_rir(room: RoomSpec, source, mic, max_order: int | None = None,
                 length: int | None = None, sound_speed: float = SOUND_SPEED) -> Rir:
    """
    Impulse response from ``source`` to ``mic`` inside ``room``.

    Images are dropped once their amplitude falls below ``1e-5`` of the
    direct path, or past ``max_order`` bounces when that is given. An RT60
    of zero means anechoic walls.
    """
    src = np.asarray(source, dtype=float)
    rcv = np.asarray(mic, dtype=float)
    for name, p in (("source", src), ("mic", rcv)):
        if not room.contains(p, margin=0.0):
            raise PlacementError(f"{name} at {p.tolist()} is outside the room")
    fs = room.sample_rate
    beta = 0.0 if room.rt60 == 0 else float(rt60_to_reflection(room)[0])
    direct = float(np.linalg.norm(src - rcv))
    if direct == 0:
        raise PlacementError("source and mic coincide")

    min_len = int(np.ceil(direct / sound_speed * fs)) + SINC_TAPS
    if length is None:
        length = max(room.default_length(), min_len)
    elif length < min(room.default_length(), min_len):
        warnings.warn(f"RIR length {length} is shorter than the decay it should hold",
                      stacklevel=2)
    max_distance = (length + SINC_TAPS // 2) / fs * sound_speed
    if beta == 0.0:
        max_order = 0

    pos, orders = image_sources(room, src, max_order=max_order, max_distance=max_distance, mic=rcv)
    dist = np.linalg.norm(pos - rcv, axis=1)
    rel = beta ** orders * direct / dist
    keep = rel >= IMAGE_CUTOFF
    dist, orders = dist[keep], orders[keep]
    gains = beta ** orders / (4.0 * np.pi * dist)
    h = _fractional_pulses(dist / sound_speed * fs, gains, length)
    return Rir(h, fs, direct)


def convolve_signal(signal, rir: Rir | np.ndarray, sample_rate: int | None = None) -> np.ndarray:
    """Full linear convolution, ``len(signal) + len(rir) - 1`` samples long."""
    if isinstance(rir, Rir):
        if sample_rate is not None and sample_rate != rir.sample_rate:
            raise ValueError(f"sample-rate mismatch: signal {sample_rate} Hz, RIR {rir.sample_rate} Hz")
        h = rir.samples
    else:
        h = np.asarray(rir, dtype=float)
    x = np.asarray(signal, dtype=float)
    if len(x) > 8 * len(h) and len(h) > 64:
        return sps.oaconvolve(x, h)
    return sps.fftconvolve(x, h)


def check_placement(room: RoomSpec, placement: Placement, geom: ArrayGeometry):
    mics = geom.mic_positions + np.asarray(placement.array_center, dtype=float)
    for m, p in enumerate(mics):
        if not room.contains(p):
            raise PlacementError(f"mic {m} at {np.round(p, 3).tolist()} violates the "
                                 f"{WALL_MARGIN} m wall margin")
    src = placement.source_position(geom)
    if not room.contains(src):
        raise PlacementError(f"source at {np.round(src, 3).tolist()} violates the "
                             f"{WALL_MARGIN} m wall margin")
    return mics, src


def array_rirs(room: RoomSpec, placement: Placement, geom: ArrayGeometry,
               length: int | None = None, sound_speed: float = SOUND_SPEED) -> list[Rir]:
    mics, src = check_placement(room, placement, geom)
    if length is None:
        far = max(np.linalg.norm(src - m) for m in mics)
        length = max(room.default_length(), int(np.ceil(far / sound_speed * room.sample_rate)) + SINC_TAPS)
    return [simulate_rir(room, src, m, length=length, sound_speed=sound_speed) for m in mics]


def render_array(room: RoomSpec, placement: Placement, geom: ArrayGeometry, source_signal,
                 sound_speed: float = SOUND_SPEED, rirs: list[Rir] | None = None) -> np.ndarray:
    """
    Microphone signals for ``source_signal`` played at the placement's
    source position. Returns shape ``(M, len(signal) + len(rir) - 1)``.
    """
    if rirs is None:
        rirs = array_rirs(room, placement, geom, sound_speed=sound_speed)
    return np.stack([convolve_signal(source_signal, h) for h in rirs])


def schroeder_decay(rir) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, starting at 0 dB."""
    h = rir.samples if isinstance(rir, Rir) else np.asarray(rir)
    edc = np.cumsum((h ** 2)[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(edc / edc[0])


def decay_time(rir: Rir, level_db: float = -60.0) -> float:
    """
    Seconds from the direct-path peak until the Schroeder curve of the
    tail first reaches ``level_db``; ``nan`` if it never does.
    """
    onset = int(np.argmax(np.abs(rir.samples)))
    edc = schroeder_decay(rir.samples[onset:])
    hit = np.nonzero(edc <= level_db)[0]
    return float(hit[0]) / rir.sample_rate if len(hit) else float("nan")


def write_rir_wav(path, rir: Rir):
    wavfile.write(path, rir.sample_rate, rir.samples.astype(np.float32))
