import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasedoa.geometry import build_ula
from phasedoa.room import (InfeasibleRt60Error, Placement, PlacementError, RoomSpec, Rir, array_rirs,
                           convolve_signal, decay_time, image_sources, render_array, rt60_to_reflection,
                           schroeder_decay, simulate_rir, write_rir_wav)

FS = 16000
C = 343.0


def test_reflection_lossless_limit():
    beta = rt60_to_reflection(RoomSpec((5, 5, 2.5), 1e9))
    assert np.allclose(beta, 1.0, atol=1e-6)


def test_reflection_table1_r2():
    # 0.161 * 62.5 / (100 * 0.2) = 0.503125 ; sqrt(1 - 0.503125) = 0.704894...
    beta = rt60_to_reflection(RoomSpec((5, 5, 2.5), 0.2))
    assert beta.shape == (6,)
    assert np.allclose(beta, np.sqrt(1 - 0.503125), rtol=1e-12)
    assert beta[0] == pytest.approx(0.7049, abs=1e-4)


def test_reflection_infeasible_boundary():
    assert rt60_to_reflection(RoomSpec((1, 1, 1), 0.05))[0] == pytest.approx(np.sqrt(1 - 0.161 / 0.3))
    with pytest.raises(InfeasibleRt60Error):
        rt60_to_reflection(RoomSpec((1, 1, 1), 0.02))


def _brute_force_images(room, src, max_order):
    """Breadth-first mirroring across the six walls."""
    L = room.dimensions
    seen = {tuple(np.round(src, 9)): 0}
    frontier = [np.asarray(src, float)]
    for depth in range(1, max_order + 1):
        nxt = []
        for p in frontier:
            for ax in range(3):
                for wall in (0.0, L[ax]):
                    q = p.copy()
                    q[ax] = 2 * wall - q[ax]
                    key = tuple(np.round(q, 9))
                    if key not in seen:
                        seen[key] = depth
                        nxt.append(q)
        frontier = nxt
    return seen


@pytest.mark.parametrize("order", [0, 1, 2])
def test_image_lattice_matches_brute_force(order):
    room = RoomSpec((6, 5, 2.5), 0.3)
    src = (1.3, 2.2, 1.1)
    pos, orders = image_sources(room, src, max_order=order)
    lattice = {tuple(np.round(p, 9)): int(o) for p, o in zip(pos, orders)}
    assert lattice == _brute_force_images(room, src, order)


def test_image_counts_low_orders():
    room = RoomSpec((6, 5, 2.5), 0.3)
    counts = [len(image_sources(room, (1.3, 2.2, 1.1), max_order=o)[0]) for o in range(3)]
    # 1 direct, 6 first-order, 18 second-order images
    assert counts == [1, 7, 25]


def _integer_delay_distance(samples):
    return samples * C / FS


def test_anechoic_single_pulse():
    room = RoomSpec((8, 8, 3), 0.0)
    d = _integer_delay_distance(100)
    src, mic = np.array([2.0, 4.0, 1.5]), np.array([2.0 + d, 4.0, 1.5])
    h = simulate_rir(room, src, mic, length=400).samples
    assert np.argmax(np.abs(h)) == 100
    assert h[100] == pytest.approx(1 / (4 * np.pi * d), rel=1e-12)
    # integer delay: the windowed sinc is a single tap
    assert np.allclose(np.delete(h, 100), 0, atol=1e-15)


def test_anechoic_peak_ratio():
    room = RoomSpec((8, 8, 3), 0.0)
    r = _integer_delay_distance(50)
    src = np.array([1.0, 4.0, 1.5])
    h1 = simulate_rir(room, src, src + [r, 0, 0], length=400).samples
    h2 = simulate_rir(room, src, src + [2 * r, 0, 0], length=400).samples
    assert np.abs(h1).max() / np.abs(h2).max() == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("r", [0.5, 0.77, 1.0, 1.3])
def test_anechoic_inverse_square_energy(r):
    room = RoomSpec((10, 10, 4), 0.0)
    src = np.array([1.0, 5.0, 2.0])
    e1 = np.sum(simulate_rir(room, src, src + [r, 0, 0], length=1200).samples ** 2)
    e2 = np.sum(simulate_rir(room, src, src + [2 * r, 0, 0], length=1200).samples ** 2)
    assert e1 / e2 == pytest.approx(4.0, rel=0.02)


def test_schroeder_decay_table1_r1():
    room = RoomSpec((6, 6, 2.5), 0.3)
    h = simulate_rir(room, (2.0, 2.5, 1.5), (3.2, 3.9, 1.5))
    assert len(h) == int(np.ceil(1.2 * 0.3 * FS))
    assert decay_time(h) == pytest.approx(0.3, rel=0.2)


def test_schroeder_curve_is_monotone():
    room = RoomSpec((5, 5, 2.5), 0.2)
    edc = schroeder_decay(simulate_rir(room, (1.5, 2.0, 1.2), (3.0, 3.0, 1.4)))
    assert edc[0] == 0.0
    finite = edc[np.isfinite(edc)]
    assert np.all(np.diff(finite) <= 1e-12)


def test_rir_rejects_outside_points():
    room = RoomSpec((5, 5, 2.5), 0.2)
    with pytest.raises(PlacementError):
        simulate_rir(room, (6.0, 1, 1), (1, 1, 1))


def test_rir_infeasible_rt60():
    with pytest.raises(InfeasibleRt60Error):
        simulate_rir(RoomSpec((1, 1, 1), 0.02), (0.3, 0.3, 0.3), (0.6, 0.6, 0.6))


def test_convolve_identities():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(300)
    h = rng.standard_normal(40)
    assert np.allclose(convolve_signal(x, np.array([1.0])), x, atol=1e-12)
    delta = np.zeros(1)
    delta[0] = 1
    assert np.allclose(convolve_signal(delta, h), h, atol=1e-12)


def _naive_convolution(x, h):
    out = np.zeros(len(x) + len(h) - 1)
    for i in range(len(x)):
        for j in range(len(h)):
            out[i + j] += x[i] * h[j]
    return out


@pytest.mark.parametrize("n, taps", [(256, 64), (5000, 100)])
def test_convolve_matches_naive(n, taps):
    rng = np.random.default_rng(n)
    x, h = rng.standard_normal(n), rng.standard_normal(taps)
    y = convolve_signal(x, Rir(h, FS, 1.0), FS)
    assert len(y) == n + taps - 1
    assert np.max(np.abs(y - _naive_convolution(x, h))) < 1e-9


def test_convolve_sample_rate_mismatch():
    with pytest.raises(ValueError):
        convolve_signal(np.ones(10), Rir(np.ones(4), 16000, 1.0), 8000)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_convolve_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y, h = rng.standard_normal(500), rng.standard_normal(500), rng.standard_normal(70)
    lhs = convolve_signal(a * x + b * y, h)
    rhs = a * convolve_signal(x, h) + b * convolve_signal(y, h)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_render_broadside_channels_identical():
    room = RoomSpec((8, 8, 3), 0.0)
    geom = build_ula(2, 0.1)
    sig = np.random.default_rng(1).standard_normal(2000)
    y = render_array(room, Placement((4, 3, 1.5), 90.0, 1.5), geom, sig)
    assert np.max(np.abs(y[0] - y[1])) <= 1e-6 * np.max(np.abs(y))


def test_render_endfire_lag():
    room = RoomSpec((10, 10, 3), 0.0)
    geom = build_ula(2, 0.343)
    sig = np.random.default_rng(2).standard_normal(4000)
    y = render_array(room, Placement((5, 3, 1.5), 0.0, 2.0), geom, sig)
    xc = np.correlate(y[0], y[1], mode="full")
    lag = np.argmax(xc) - (len(y[1]) - 1)
    # mic 0 hears the wave later than mic 1 by d / c
    assert lag == round(FS * 0.343 / C)


def test_render_shape_contract():
    room = RoomSpec((6, 6, 2.5), 0.3)
    geom = build_ula(4, 0.03)
    sig = np.random.default_rng(3).standard_normal(3000)
    placement = Placement((3.0, 2.5, 1.3), 45.0, 2.0)
    rirs = array_rirs(room, placement, geom)
    y = render_array(room, placement, geom, sig, rirs=rirs)
    assert y.shape == (4, len(sig) + len(rirs[0]) - 1)


def test_render_rejects_source_outside():
    room = RoomSpec((3, 3, 2.5), 0.2)
    with pytest.raises(PlacementError):
        render_array(room, Placement((1.5, 1.5, 1.2), 0.0, 2.0), build_ula(4, 0.03), np.ones(100))


def test_placement_angle_convention():
    p = Placement((3.0, 2.0, 1.0), 0.0, 2.0)
    assert np.allclose(p.source_position(), [5.0, 2.0, 1.0])
    assert np.allclose(Placement((3.0, 2.0, 1.0), 90.0, 2.0).source_position(), [3.0, 4.0, 1.0])


def test_rir_wav_export(tmp_path):
    from scipy.io import wavfile
    h = simulate_rir(RoomSpec((5, 5, 2.5), 0.2), (1, 1, 1), (2, 2, 1.2))
    write_rir_wav(tmp_path / "rir.wav", h)
    fs, data = wavfile.read(tmp_path / "rir.wav")
    assert fs == FS and data.dtype == np.float32
    assert np.allclose(data, h.samples, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.9, 2.0))
def test_inverse_square_energy_any_offset(r):
    # from 0.9 m the whole 81-tap kernel lands after sample 0
    room = RoomSpec((10, 10, 4), 0.0)
    src = np.array([1.0, 5.0, 2.0])
    e1 = np.sum(simulate_rir(room, src, src + [r, 0, 0], length=1200).samples ** 2)
    e2 = np.sum(simulate_rir(room, src, src + [2 * r, 0, 0], length=1200).samples ** 2)
    assert e1 / e2 == pytest.approx(4.0, rel=1e-9)


def test_half_sample_offset_energy():
    room = RoomSpec((10, 10, 4), 0.0)
    src = np.array([1.0, 5.0, 2.0])
    # 50 and 100.5 samples of travel: integer vs worst-case fractional offset
    r1, r2 = 50 * C / FS, 100.5 * C / FS
    e1 = np.sum(simulate_rir(room, src, src + [r1, 0, 0], length=400).samples ** 2)
    e2 = np.sum(simulate_rir(room, src, src + [r2, 0, 0], length=400).samples ** 2)
    assert e1 / e2 == pytest.approx((r2 / r1) ** 2, rel=1e-9)
