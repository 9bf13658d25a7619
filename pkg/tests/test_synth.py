import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasedoa.geometry import apply_perturbation, build_grid, build_ula, middle_mic_perturbation
from phasedoa.room import PlacementError, RoomSpec
from phasedoa.stft import StftParams
from phasedoa.synth import (DatasetShard, ShardError, SynthConfig, TestSetConfig, active_frame_mask, mix_at_snr,
                            read_mask, read_shard, read_wav, sample_array_positions, speech_shaped_noise,
                            synthesize_test_set, synthesize_training_set, white_noise_source, write_mask,
                            write_shard, write_wav)

GEOM = build_ula(4, 0.03)
GRID = build_grid(5)
ROOM = RoomSpec((5, 5, 2.5), 0.2, name="R2")


def small_config(seed=0, **kw):
    base = dict(rooms=[ROOM], geometry=GEOM, grid=GRID, array_positions_per_room=1, source_distances=(1.0,),
                seed=seed, array_positions={0: [(2.5, 1.5, 1.2)]})
    base.update(kw)
    return SynthConfig(**base)


# --- sources and mixing --------------------------------------------------------------


def test_white_noise_statistics():
    x = white_noise_source(1_000_000, 0)
    assert abs(x.mean()) < 0.005
    assert x.var() == pytest.approx(1.0, abs=0.01)


def test_white_noise_reproducible():
    assert np.array_equal(white_noise_source(100, 7), white_noise_source(100, 7))
    assert not np.array_equal(white_noise_source(100, 7), white_noise_source(100, 8))


@pytest.mark.parametrize("snr", [0.0, 10.0, 20.0, -5.0])
def test_mix_realised_snr(snr):
    clean = np.random.default_rng(1).standard_normal((4, 16000)) * 0.3
    noisy, noise = mix_at_snr(clean, snr, 2, return_noise=True)
    assert np.allclose(noisy - noise, clean, atol=1e-12)
    realised = 10 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))
    assert realised == pytest.approx(snr, abs=0.1)


def test_mix_zero_db_equal_powers():
    clean = np.sin(np.arange(8000) * 0.1)[None]
    _, noise = mix_at_snr(clean, 0.0, 3, return_noise=True)
    assert np.mean(noise ** 2) == pytest.approx(np.mean(clean ** 2), rel=1e-9)


def test_mix_infinite_snr_identity():
    clean = np.random.default_rng(4).standard_normal((2, 500))
    assert np.array_equal(mix_at_snr(clean, np.inf), clean)


def test_mix_zero_power_rejected():
    with pytest.raises(ValueError):
        mix_at_snr(np.zeros((4, 100)), 10.0, 0)


def test_speech_shaped_noise_has_silences():
    x = speech_shaped_noise(4.0, 16000, seed=1)
    assert len(x) == 64000
    assert np.mean(x ** 2) == pytest.approx(1.0)
    mask = active_frame_mask(x, StftParams())
    assert 0.3 < mask.mean() < 0.95


def test_speech_shaped_noise_spectrum():
    from scipy.signal import welch
    x = np.concatenate([speech_shaped_noise(4.0, 16000, seed=s) for s in range(10)])
    f, p = welch(x, 16000, nperseg=1024)

    def band(lo, hi):
        return np.mean(p[(f >= lo) & (f < hi)] * f[(f >= lo) & (f < hi)] ** 2)

    # -6 dB per octave above the corner means f^2 * PSD is flat there
    assert 10 * np.log10(band(1000, 2000) / band(2000, 4000)) == pytest.approx(0.0, abs=0.5)
    assert 10 * np.log10(band(2000, 4000) / band(4000, 7000)) == pytest.approx(0.0, abs=0.5)
    # and the region between the two corners is flat
    assert 10 * np.log10(np.mean(p[(f >= 250) & (f < 350)]) / np.mean(p[(f >= 400) & (f < 500)])) \
        == pytest.approx(0.0, abs=1.0)


def test_active_mask_silence_and_tone():
    p = StftParams()
    assert not active_frame_mask(np.zeros(4000), p).any()
    x = np.zeros(16000)
    x[8000:12000] = np.sin(np.arange(4000) * 0.3)
    m = active_frame_mask(x, p)
    assert len(m) == p.frame_count(16000)
    on = np.flatnonzero(m)
    # frames touching the tone are active, the rest are not
    assert on[0] == (8000 - 256) // 128 + 1 and on[-1] == 12000 // 128 - (1 if 12000 % 128 == 0 else 0)


# --- shards ------------------------------------------------------------------------------


def random_shard(n=50, seed=0):
    rng = np.random.default_rng(seed)
    maps = rng.uniform(-np.pi, np.pi, (n, 4, 129)).astype(np.float32)
    return DatasetShard(4, 129, 37, seed, maps, rng.integers(0, 37, n).astype(np.uint16), "unit")


def test_shard_round_trip(tmp_path):
    s = random_shard()
    write_shard(tmp_path / "a.doas", s)
    back = read_shard(tmp_path / "a.doas")
    assert back.phase_maps.tobytes() == s.phase_maps.tobytes()
    assert np.array_equal(back.labels, s.labels)
    assert (back.n_mics, back.n_bins, back.n_classes, back.seed, back.provenance) == (4, 129, 37, 0, "unit")


def test_shard_layout(tmp_path):
    s = random_shard(3)
    write_shard(tmp_path / "a.doas", s)
    raw = (tmp_path / "a.doas").read_bytes()
    header = 4 + 2 + 4 * 3 + 8 * 2 + 4 + len("unit")
    assert raw[:4] == b"DOAS"
    assert len(raw) == header + 3 * (4 * 129 * 4 + 2)
    first = np.frombuffer(raw, "<f4", count=4 * 129, offset=header)
    assert np.array_equal(first, s.phase_maps[0].ravel())
    label = int.from_bytes(raw[header + 4 * 129 * 4:header + 4 * 129 * 4 + 2], "little")
    assert label == s.labels[0]


def test_shard_truncated(tmp_path):
    write_shard(tmp_path / "a.doas", random_shard())
    data = (tmp_path / "a.doas").read_bytes()
    (tmp_path / "b.doas").write_bytes(data[:-7])
    with pytest.raises(ShardError):
        read_shard(tmp_path / "b.doas")
    (tmp_path / "c.doas").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ShardError):
        read_shard(tmp_path / "c.doas")


def test_shard_label_range():
    rng = np.random.default_rng(0)
    with pytest.raises(ShardError):
        DatasetShard(4, 129, 5, 0, rng.random((2, 4, 129)).astype(np.float32), np.array([0, 5], np.uint16))


def test_mask_round_trip(tmp_path):
    @settings(max_examples=30)
    @given(st.lists(st.booleans(), max_size=300))
    def check(bits):
        write_mask(tmp_path / "x.mask", bits)
        assert read_mask(tmp_path / "x.mask", len(bits)).tolist() == bits
    check()


def test_mask_too_short(tmp_path):
    write_mask(tmp_path / "m", [True] * 8)
    with pytest.raises(ShardError):
        read_mask(tmp_path / "m", 9)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(5).uniform(-0.9, 0.9, (4, 1000))
    write_wav(tmp_path / "a.wav", 16000, x)
    fs, y = read_wav(tmp_path / "a.wav")
    assert fs == 16000 and y.shape == (4, 1000)
    assert np.allclose(y, x, atol=1e-7)
    write_wav(tmp_path / "b.wav", 16000, x[0], pcm16=True)
    fs, y = read_wav(tmp_path / "b.wav")
    assert y.shape == (1, 1000) and np.max(np.abs(y[0] - x[0])) <= 0.5 / 32768


def test_wav_unreadable(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"not a wav")
    with pytest.raises(OSError):
        read_wav(tmp_path / "bad.wav")


# --- training set ----------------------------------------------------------------------------


def test_expected_frame_count():
    cfg = small_config()
    assert cfg.frames_per_utterance == 124
    assert cfg.expected_frames() == 37 * 124 == 4588


def test_config_rejects_reversed_snr():
    with pytest.raises(ValueError):
        small_config(snr_range=(20, 0))


@pytest.fixture(scope="module")
def small_train(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    man = synthesize_training_set(small_config(seed=11), d / "a.doas")
    return d, man


def test_training_set_counts_and_balance(small_train):
    d, man = small_train
    shard = read_shard(d / "a.doas")
    assert shard.frame_count == man["frame_count"] == 4588
    assert shard.phase_maps.shape == (4588, 4, 129)
    assert np.array_equal(np.bincount(shard.labels, minlength=37), np.full(37, 124))
    assert np.all(shard.phase_maps > -np.pi) and np.all(shard.phase_maps <= np.pi)
    snrs = [s for c in man["conditions"] for s in c["snr_db"]]
    assert min(snrs) >= 0 and max(snrs) <= 20


def test_training_set_byte_identical(small_train, tmp_path):
    d, man = small_train
    again = synthesize_training_set(small_config(seed=11), tmp_path / "b.doas", threads=2)
    assert (tmp_path / "b.doas").read_bytes() == (d / "a.doas").read_bytes()
    assert again["shards"][0]["sha256"] == man["shards"][0]["sha256"]


def test_training_set_seed_changes_bytes(tmp_path):
    cfg = small_config(seed=12, grid=build_grid(90))
    synthesize_training_set(cfg, tmp_path / "a.doas")
    synthesize_training_set(small_config(seed=13, grid=build_grid(90)), tmp_path / "b.doas")
    assert (tmp_path / "a.doas").read_bytes() != (tmp_path / "b.doas").read_bytes()


def test_array_positions_keep_sources_inside():
    pos = sample_array_positions(RoomSpec((6, 6, 2.5), 0.3), 2, GEOM, (1.0, 2.0), GRID.angles_deg, 0)
    assert len(pos) == 2
    for c in pos:
        assert all(1.0 <= v <= hi - 1.0 for v, hi in zip(c, (6, 6, 2.5)))
        # the 2 m half circle of sources on the +y side fits inside the room
        assert c[0] - 2 > 0 and c[0] + 2 < 6 and c[1] + 2 < 6


def test_array_positions_impossible():
    with pytest.raises(PlacementError):
        sample_array_positions(RoomSpec((3, 3, 2.5), 0.2), 1, GEOM, (2.0,), GRID.angles_deg, 0, max_tries=200)


# --- test set -----------------------------------------------------------------------------------


def test_config(**kw):
    base = dict(room=ROOM, array_center=(2.5, 1.5, 1.2), source_distance=1.0, geometry=GEOM, grid=GRID,
                snr_db=(0.0, 20.0), seed=3, name="t")
    base.update(kw)
    return TestSetConfig(**base)


test_config.__test__ = False


def test_test_set_frames_and_masks(tmp_path):
    clips = [speech_shaped_noise(4.0, seed=i) for i in range(2)]
    man = synthesize_test_set(test_config(clip_angles=(135.0, 20.0)), clips, tmp_path)
    assert [s["path"] for s in man["shards"]] == ["t_snr0.doas", "t_snr20.doas"]
    shards = [read_shard(tmp_path / s["path"]) for s in man["shards"]]
    for s in shards:
        assert s.frame_count == 2 * 499
        assert np.array_equal(s.labels, np.repeat([27, 4], 499))
    m0 = read_mask(tmp_path / "t_snr0.mask", 998)
    m1 = read_mask(tmp_path / "t_snr20.mask", 998)
    assert np.array_equal(m0, m1)
    expected = np.concatenate([active_frame_mask(c, StftParams()) for c in clips])
    assert np.array_equal(m0, expected)


def test_test_set_silent_clip(tmp_path):
    man = synthesize_test_set(test_config(clip_angles=(90.0,)), [np.zeros(16000)], tmp_path)
    assert all(s["active_frames"] == 0 for s in man["shards"])


def test_clip_angles_cover_grid_without_repeats():
    angles = test_config().angles_for(20)
    assert len(set(angles)) == 20
    assert set(angles) <= set(GRID.angles_deg.tolist())


def test_perturbed_test_set_keeps_nominal_labels(tmp_path):
    g = apply_perturbation(GEOM, middle_mic_perturbation(GEOM))
    man = synthesize_test_set(test_config(geometry=g, clip_angles=(45.0,), snr_db=(10.0,)),
                              [speech_shaped_noise(1.0, seed=9)], tmp_path)
    shard = read_shard(tmp_path / man["shards"][0]["path"])
    assert np.all(shard.labels == 9)
