"""
Training and test set synthesis.

Training data are white-noise sources rendered through simulated rooms at
every grid angle, with spatially white Gaussian noise at an SNR drawn per
utterance. Test data are speech (or speech-like) clips rendered through a
test room at fixed SNRs, with a mask of speech-active frames.

Frames are persisted in ``DOAS`` shards:

    b"DOAS" | u16 version | u32 M | u32 K | u32 I | u64 frame_count | u64 seed
    | u32 n | n bytes of UTF-8 provenance text
    | frame_count x (M*K float32 row-major phase map, u16 label)

all little-endian. Active masks go to a sidecar of packed bits
(``numpy.packbits`` with little bit order) in the same frame order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .geometry import SOUND_SPEED, ArrayGeometry, DoaGrid, class_of_angle
from .room import Placement, PlacementError, RoomSpec, array_rirs, check_placement, render_array
from .stft import StftParams, phase_maps, stft

log = logging.getLogger(__name__)

SHARD_MAGIC = b"DOAS"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHIIIQQI")
ACTIVE_THRESHOLD_DB = -40.0


class ShardError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sources and mixing


def white_noise_source(length: int, seed) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian samples; same seed, same samples."""
    if length <= 0:
        raise ValueError("length must be positive")
    return np.random.default_rng(seed).standard_normal(int(length))


def mix_at_snr(clean, snr_db: float, rng=None, return_noise: bool = False):
    """
    Add independent Gaussian noise to every channel at ``snr_db``.

    Signal and noise powers are averaged over the whole utterance and all
    channels. The noise is rescaled so the realised SNR is exact. An
    infinite SNR returns the input unchanged.
    """
    x = np.atleast_2d(np.asarray(clean, dtype=np.float64))
    p_sig = np.mean(x ** 2)
    if p_sig == 0:
        raise ValueError("clean signal has zero power; SNR is undefined")
    if np.isposinf(snr_db):
        noise = np.zeros_like(x)
    else:
        rng = np.random.default_rng(rng)
        noise = rng.standard_normal(x.shape)
        noise *= np.sqrt(p_sig / 10.0 ** (snr_db / 10.0) / np.mean(noise ** 2))
    out = (x + noise).reshape(np.shape(clean))
    return (out, noise.reshape(np.shape(clean))) if return_noise else out


def _syllable_envelope(n: int, sample_rate: int, rng) -> np.ndarray:
    env = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sample_rate)
    while pos < n:
        seg = min(int(rng.uniform(0.1, 0.4) * sample_rate), n - pos)
        if seg < 32:
            break
        env[pos:pos + seg] = np.sqrt(np.hanning(seg)) * rng.uniform(0.3, 1.0)
        pos += seg + int(rng.uniform(0.05, 0.25) * sample_rate)
    return env


def speech_shaped_noise(duration: float, sample_rate: int = 16000, seed=0,
                        corner_hz: float = 500.0, highpass_hz: float = 100.0) -> np.ndarray:
    """
    Stand-in for a speech clip when no corpus is available.

    Gaussian noise with a long-term speech-like spectrum (flat up to
    ``corner_hz``, -6 dB per octave above it, first-order roll-off below
    ``highpass_hz``), gated by syllable-length bursts separated by silent
    gaps. Normalised to unit power over the whole clip.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    if n == 0:
        return np.zeros(0)
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    gain = np.minimum(1.0, corner_hz / np.maximum(f, 1e-9)) * f / np.hypot(f, highpass_hz)
    x = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * gain, n)
    x *= _syllable_envelope(n, sample_rate, rng)
    p = np.mean(x ** 2)
    return x / np.sqrt(p) if p > 0 else x


def active_frame_mask(clean, params: StftParams, threshold_db: float = ACTIVE_THRESHOLD_DB) -> np.ndarray:
    """
    Frames whose clean energy is within ``threshold_db`` of the loudest
    frame. Energy is the plain sum of squares over each frame's samples.
    """
    x = np.asarray(clean, dtype=np.float64)
    n = params.frame_count(len(x))
    if n == 0:
        return np.zeros(0, dtype=bool)
    win = np.lib.stride_tricks.sliding_window_view(x, params.dft_length)[::params.hop][:n]
    energy = np.sum(win ** 2, axis=1)
    peak = energy.max()
    if peak == 0:
        return np.zeros(n, dtype=bool)
    return energy > peak * 10.0 ** (threshold_db / 10.0)


# ---------------------------------------------------------------------------
# shards


@dataclass
class DatasetShard:
    n_mics: int
    n_bins: int
    n_classes: int
    seed: int
    phase_maps: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if len(self.phase_maps) != len(self.labels):
            raise ShardError("frame and label counts differ")
        if self.phase_maps.shape[1:] != (self.n_mics, self.n_bins):
            raise ShardError(f"phase maps {self.phase_maps.shape[1:]} vs header {(self.n_mics, self.n_bins)}")
        if len(self.labels) and int(self.labels.max()) >= self.n_classes:
            raise ShardError("label outside the class range")

    @property
    def frame_count(self) -> int:
        return len(self.labels)


def _record_dtype(M, K):
    return np.dtype([("phase", "<f4", (M, K)), ("label", "<u2")])


class ShardWriter:
    """Streams frames to a shard file, patching the frame count on close."""

    def __init__(self, path, n_mics: int, n_bins: int, n_classes: int, seed: int, provenance: str = ""):
        self.path = Path(path)
        self.dims = (n_mics, n_bins, n_classes)
        self.seed = int(seed)
        self.count = 0
        self._dtype = _record_dtype(n_mics, n_bins)
        self._prov = provenance.encode("utf-8")
        self._fh = open(self.path, "wb")
        self._write_header()

    def _write_header(self):
        self._fh.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, *self.dims, self.count,
                                    self.seed & (2 ** 64 - 1), len(self._prov)))
        self._fh.write(self._prov)

    def write(self, maps, labels):
        maps = np.asarray(maps)
        labels = np.asarray(labels)
        if maps.shape[1:] != self.dims[:2]:
            raise ShardError(f"frames of shape {maps.shape[1:]} do not fit shard {self.dims[:2]}")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.dims[2]):
            raise ShardError("label outside the class range")
        rec = np.empty(len(labels), dtype=self._dtype)
        rec["phase"] = maps
        rec["label"] = labels
        self._fh.write(rec.tobytes())
        self.count += len(labels)

    def close(self):
        self._fh.seek(0)
        self._write_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_shard(path, shard: DatasetShard):
    with ShardWriter(path, shard.n_mics, shard.n_bins, shard.n_classes, shard.seed, shard.provenance) as w:
        w.write(shard.phase_maps, shard.labels)


def read_shard(path) -> DatasetShard:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ShardError(f"{path}: truncated shard header")
    magic, version, M, K, I, count, seed, n = _HEADER.unpack_from(data)
    if magic != SHARD_MAGIC:
        raise ShardError(f"{path}: not a DOAS shard")
    if version != SHARD_VERSION:
        raise ShardError(f"{path}: unsupported shard version {version}")
    start = _HEADER.size + n
    prov = data[_HEADER.size:start].decode("utf-8")
    dt = _record_dtype(M, K)
    if len(data) - start != count * dt.itemsize:
        raise ShardError(f"{path}: expected {count} records, file size disagrees")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=start)
    return DatasetShard(M, K, I, seed, np.ascontiguousarray(rec["phase"]),
                        rec["label"].astype(np.uint16), prov)


def write_mask(path, mask):
    Path(path).write_bytes(np.packbits(np.asarray(mask, dtype=bool), bitorder="little").tobytes())


def read_mask(path, frame_count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(Path(path).read_bytes(), dtype=np.uint8), bitorder="little")
    if len(bits) < frame_count:
        raise ShardError(f"{path}: mask shorter than {frame_count} frames")
    return bits[:frame_count].astype(bool)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_wav(path) -> tuple[int, np.ndarray]:
    """Sample rate and float samples shaped ``(channels, samples)``."""
    try:
        fs, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype.kind != "f":
        raise OSError(f"{path}: unsupported sample format {data.dtype}")
    data = np.asarray(data, dtype=np.float64)
    return int(fs), (data[None, :] if data.ndim == 1 else data.T)


def write_wav(path, sample_rate: int, samples, pcm16: bool = False):
    x = np.asarray(samples)
    x = x.T if x.ndim == 2 else x
    if pcm16:
        x = np.clip(np.round(x * 32768), -32768, 32767).astype(np.int16)
    else:
        x = x.astype(np.float32)
    wavfile.write(path, sample_rate, x)


# ---------------------------------------------------------------------------
# training set


@dataclass
class SynthConfig:
    """
    Training-set recipe: every (room, array position, distance, grid angle)
    condition gets ``utterances_per_condition`` white-noise utterances.
    """

    rooms: list
    geometry: ArrayGeometry
    grid: DoaGrid
    array_positions_per_room: int = 7
    source_distances: tuple = (1.0, 2.0)
    snr_range: tuple = (0.0, 20.0)
    utterance_length: float = 1.0
    utterances_per_condition: int = 1
    seed: int = 0
    stft: StftParams = field(default_factory=StftParams)
    sound_speed: float = SOUND_SPEED
    position_margin: float = 1.0
    array_positions: dict | None = None

    def __post_init__(self):
        if self.snr_range[0] > self.snr_range[1]:
            raise ValueError("snr_range low must not exceed high")
        if self.array_positions_per_room < 1 or self.utterances_per_condition < 1:
            raise ValueError("counts must be at least 1")
        if not self.rooms:
            raise ValueError("at least one room is required")
        rates = {r.sample_rate for r in self.rooms}
        if len(rates) != 1:
            raise ValueError(f"rooms use different sample rates {sorted(rates)}")

    @property
    def sample_rate(self) -> int:
        return self.rooms[0].sample_rate

    @property
    def frames_per_utterance(self) -> int:
        return self.stft.frame_count(int(round(self.utterance_length * self.sample_rate)))

    def condition_count(self) -> int:
        return (len(self.rooms) * self.array_positions_per_room * len(self.source_distances)
                * self.grid.class_count)

    def expected_frames(self) -> int:
        return self.condition_count() * self.utterances_per_condition * self.frames_per_utterance


def _placement_fits(room, center, geom, distances, angles):
    try:
        for d in distances:
            for a in angles:
                check_placement(room, Placement(tuple(center), a, d), geom)
    except PlacementError:
        return False
    return True


def sample_array_positions(room: RoomSpec, count: int, geom: ArrayGeometry, distances, angles,
                           seed, margin: float = 1.0, max_tries: int = 10000) -> list[tuple]:
    """
    Array centres drawn uniformly with ``margin`` from the walls such that
    every source position (all distances and angles) stays inside the room.
    """
    rng = np.random.default_rng(seed)
    L = np.asarray(room.dimensions)
    lo = np.minimum(margin, L / 2)
    hi = L - lo
    out = []
    for _ in range(max_tries):
        c = lo + rng.random(3) * (hi - lo)
        if _placement_fits(room, c, geom, distances, angles):
            out.append(tuple(float(v) for v in np.round(c, 4)))
            if len(out) == count:
                return out
    raise PlacementError(
        f"could not place {count} arrays in room {room.name or room.dimensions} with sources at {list(distances)} m")


def _condition_seed(seed, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2 ** 63 - 1), *key])


def room_positions(config: SynthConfig) -> list[list[tuple]]:
    if config.array_positions is not None:
        return [list(map(tuple, config.array_positions[i])) for i in range(len(config.rooms))]
    return [sample_array_positions(room, config.array_positions_per_room, config.geometry,
                                   config.source_distances, config.grid.angles_deg,
                                   _condition_seed(config.seed, 1, ri), config.position_margin)
            for ri, room in enumerate(config.rooms)]


def _render_noise_condition(config: SynthConfig, room, ri, pi, center, di, dist, ai, angle):
    placement = Placement(center, float(angle), float(dist))
    rirs = array_rirs(room, placement, config.geometry, sound_speed=config.sound_speed)
    L = int(round(config.utterance_length * config.sample_rate))
    R = len(rirs[0])
    label = class_of_angle(config.grid, float(angle))
    maps, labels, snrs = [], [], []
    for u in range(config.utterances_per_condition):
        ss = _condition_seed(config.seed, 2, ri, pi, di, ai, u)
        src_seed, snr_seed, noise_seed = ss.spawn(3)
        src = white_noise_source(L + R - 1, src_seed)
        # keep the steady-state part where every sample has the full RIR behind it
        clean = render_array(room, placement, config.geometry, src, rirs=rirs)[:, R - 1:R - 1 + L]
        snr = float(np.random.default_rng(snr_seed).uniform(*config.snr_range))
        noisy = mix_at_snr(clean, snr, noise_seed)
        m = phase_maps(stft(noisy, config.stft))
        maps.append(m.astype(np.float32))
        labels.append(np.full(len(m), label, dtype=np.uint16))
        snrs.append(snr)
    return np.concatenate(maps), np.concatenate(labels), snrs


def synthesize_training_set(config: SynthConfig, out_path, threads: int = 1, provenance: str = "") -> dict:
    """
    Render the full condition product and write one shard.

    Conditions are written in (room, position, distance, angle) order
    regardless of ``threads``, so the shard bytes depend only on the
    config and seed. Returns the manifest dictionary.
    """
    out_path = Path(out_path)
    positions = room_positions(config)
    tasks = []
    for ri, room in enumerate(config.rooms):
        for pi, center in enumerate(positions[ri]):
            for di, dist in enumerate(config.source_distances):
                for ai, angle in enumerate(config.grid.angles_deg):
                    tasks.append((config, room, ri, pi, center, di, dist, ai, angle))
    M, K, I = config.geometry.n_mics, config.stft.bin_count, config.grid.class_count
    conditions = []
    with ShardWriter(out_path, M, K, I, config.seed, provenance) as w:
        def run(t):
            return _render_noise_condition(*t)
        if threads > 1:
            pool = ThreadPoolExecutor(threads)
            results = pool.map(run, tasks)
        else:
            pool = None
            results = map(run, tasks)
        try:
            for t, (maps, labels, snrs) in zip(tasks, results):
                w.write(maps, labels)
                _, room, ri, pi, center, di, dist, ai, angle = t
                conditions.append({"room": room.name or ri, "position": pi, "array_center": list(center),
                                   "distance_m": float(dist), "angle_deg": float(angle),
                                   "frames": int(len(labels)), "snr_db": [round(s, 6) for s in snrs]})
                if len(conditions) % 50 == 0:
                    log.info("synthesised %d/%d conditions", len(conditions), len(tasks))
        finally:
            if pool is not None:
                pool.shutdown()
    return {
        "kind": "train",
        "shards": [{"path": out_path.name, "frame_count": w.count, "sha256": file_digest(out_path)}],
        "frame_count": w.count,
        "seed": int(config.seed),
        "n_mics": M, "n_bins": K, "n_classes": I,
        "array_positions": [[list(c) for c in p] for p in positions],
        "conditions": conditions,
    }


# ---------------------------------------------------------------------------
# test set


@dataclass
class TestSetConfig:
    """
    One test room and array placement; each clip is rendered from its own
    grid angle and mixed at every SNR in ``snr_db``.

    ``geometry`` is the array actually rendered (it may be perturbed);
    labels always come from the nominal grid.
    """

    room: RoomSpec
    array_center: tuple
    source_distance: float
    geometry: ArrayGeometry
    grid: DoaGrid
    snr_db: tuple = (5.0, 15.0)
    clip_angles: tuple | None = None
    seed: int = 0
    stft: StftParams = field(default_factory=StftParams)
    sound_speed: float = SOUND_SPEED
    name: str = "test"

    __test__ = False

    def angles_for(self, n_clips: int) -> list[float]:
        if self.clip_angles is not None:
            if len(self.clip_angles) != n_clips:
                raise ValueError(f"{len(self.clip_angles)} clip angles for {n_clips} clips")
            return [float(a) for a in self.clip_angles]
        rng = np.random.default_rng(_condition_seed(self.seed, 3))
        perm = rng.permutation(self.grid.class_count)
        return [float(self.grid.angles_deg[perm[i % len(perm)]]) for i in range(n_clips)]


def _load_clips(speech, sample_rate):
    clips = []
    for item in speech:
        if isinstance(item, (str, Path)):
            fs, data = read_wav(item)
            if data.shape[0] != 1:
                raise ValueError(f"{item}: speech input must be mono, got {data.shape[0]} channels")
            if fs != sample_rate:
                raise ValueError(f"{item}: sample rate {fs} Hz does not match {sample_rate} Hz")
            clips.append(data[0])
        else:
            clips.append(np.asarray(item, dtype=np.float64))
    return clips


def render_test_clips(config: TestSetConfig, speech) -> list[dict]:
    """Clean multichannel renders, trimmed to the clip length, plus labels and masks."""
    clips = _load_clips(speech, config.room.sample_rate)
    angles = config.angles_for(len(clips))
    cache = {}
    out = []
    for ci, (clip, angle) in enumerate(zip(clips, angles)):
        placement = Placement(tuple(config.array_center), angle, config.source_distance)
        if angle not in cache:
            cache[angle] = array_rirs(config.room, placement, config.geometry, sound_speed=config.sound_speed)
        clean = render_array(config.room, placement, config.geometry, clip, rirs=cache[angle])[:, :len(clip)]
        n = config.stft.frame_count(len(clip))
        out.append({"clean": clean, "angle": angle, "label": class_of_angle(config.grid, angle),
                    "mask": active_frame_mask(clip, config.stft), "frames": n})
    return out


def synthesize_test_set(config: TestSetConfig, speech, out_dir, rendered=None) -> dict:
    """
    Write one shard and mask per SNR, named ``{name}_snr{snr}.doas`` /
    ``.mask``. All SNR shards share labels and masks. Frames are active
    when the dry clip's frame energy is within 40 dB of its loudest frame.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if rendered is None:
        rendered = render_test_clips(config, speech)
    M, K, I = config.geometry.n_mics, config.stft.bin_count, config.grid.class_count
    shards = []
    for si, snr in enumerate(config.snr_db):
        stem = f"{config.name}_snr{snr:g}"
        path = out_dir / f"{stem}.doas"
        masks = []
        with ShardWriter(path, M, K, I, config.seed, f"{config.name} snr={snr:g}") as w:
            for ci, r in enumerate(rendered):
                n = r["frames"]
                if n == 0:
                    continue
                if np.mean(r["clean"] ** 2) == 0:
                    noisy = r["clean"]
                else:
                    noisy = mix_at_snr(r["clean"], snr, _condition_seed(config.seed, 4, si, ci))
                maps = phase_maps(stft(noisy, config.stft))
                w.write(maps.astype(np.float32), np.full(n, r["label"], dtype=np.uint16))
                masks.append(r["mask"])
        mask = np.concatenate(masks) if masks else np.zeros(0, dtype=bool)
        write_mask(out_dir / f"{stem}.mask", mask)
        shards.append({"path": path.name, "mask": f"{stem}.mask", "snr_db": float(snr),
                       "frame_count": w.count, "active_frames": int(mask.sum()),
                       "sha256": file_digest(path)})
    return {
        "kind": "test",
        "name": config.name,
        "room": config.room.name,
        "distance_m": float(config.source_distance),
        "clip_angles": [r["angle"] for r in rendered],
        "shards": shards,
        "seed": int(config.seed),
        "n_mics": M, "n_bins": K, "n_classes": I,
    }


def manifest_digest(manifest: dict) -> str:
    """Digest over shard contents and frame counts (paths excluded)."""
    parts = [(s.get("sha256"), s.get("frame_count")) for s in manifest.get("shards", [])]
    return hashlib.sha256(json.dumps([parts, manifest.get("seed")]).encode()).hexdigest()


__all__ = [
    "DatasetShard", "ShardError", "ShardWriter", "SynthConfig", "TestSetConfig",
    "active_frame_mask", "file_digest", "manifest_digest", "mix_at_snr", "read_mask", "read_shard",
    "read_wav", "render_test_clips", "room_positions", "sample_array_positions", "speech_shaped_noise",
    "synthesize_test_set", "synthesize_training_set", "white_noise_source", "write_mask",
    "write_shard", "write_wav",
]
