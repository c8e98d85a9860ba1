import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pokedepth import autodiff as ad
from pokedepth import sim
from pokedepth.baselines import (
    BiasEstimate, SensorError, apply_bias, estimate_bias, gaussian_filter_predict, predict_raw,
    raw_sensor_predict, scaled_sigma, select_filter_sigma, smooth_map, train_autoencoder,
)
from pokedepth.net import NetConfig, fill_invalid
from pokedepth.objectives import depth_loss
from pokedepth.trainer import RunConfig


def test_raw_sensor_reads_the_pixel():
    d = np.full((5, 5), 600.0)
    assert raw_sensor_predict(d, (2, 2)) == 600.0


def test_raw_sensor_falls_back_to_nearest_valid():
    d = np.zeros((5, 5))
    d[2, 3] = 610.0
    d[0, 0] = 700.0
    assert raw_sensor_predict(d, (2, 2)) == 610.0
    with pytest.raises(SensorError):
        raw_sensor_predict(np.zeros((3, 3)), (1, 1))


def test_nearest_valid_tie_break_is_row_major():
    d = np.zeros((3, 3))
    d[1, 0], d[0, 1] = 5.0, 7.0
    assert raw_sensor_predict(d, (1, 1)) == 7.0


def test_filter_identity_on_constants():
    d = np.full((16, 16), 500.0)
    for g in [(0, 0), (7, 9), (15, 15)]:
        assert gaussian_filter_predict(d, g, 2.0) == pytest.approx(500.0, abs=1e-9)


def test_filter_beats_raw_on_isolated_gross_error():
    d = np.full((21, 21), 700.0)
    d[10, 10] = 1500.0
    assert abs(gaussian_filter_predict(d, (10, 10), 2.0) - 700.0) < abs(raw_sensor_predict(d, (10, 10)) - 700.0)


def test_narrow_filter_reads_the_pixel():
    rng = np.random.default_rng(0)
    d = rng.uniform(400, 700, (9, 9))
    assert gaussian_filter_predict(d, (4, 4), 0.1) == pytest.approx(d[4, 4], abs=1e-3)


def test_filter_against_direct_sum():
    rng = np.random.default_rng(1)
    d = rng.uniform(400, 700, (12, 12))
    d[rng.random(d.shape) < 0.2] = 0.0
    g, sigma = (3, 8), 1.7
    num = den = 0.0
    for r in range(12):
        for c in range(12):
            dist2 = (r - g[0]) ** 2 + (c - g[1]) ** 2
            if d[r, c] != 0.0 and dist2 <= (3 * sigma) ** 2:
                w = np.exp(-dist2 / (2 * sigma ** 2))
                num, den = num + w * d[r, c], den + w
    assert gaussian_filter_predict(d, g, sigma) == pytest.approx(num / den, rel=1e-12)


def test_filter_all_invalid_window_falls_back():
    d = np.zeros((30, 30))
    d[0, 0] = 650.0
    assert gaussian_filter_predict(d, (25, 25), 1.0) == 650.0
    with pytest.raises(ValueError):
        gaussian_filter_predict(d, (0, 0), 0.0)


maps = arrays(np.float64, (8, 8), elements=st.floats(100, 1000))


@settings(max_examples=50, deadline=None)
@given(maps, maps, st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.3, 4))
def test_filter_is_linear(d1, d2, a, b, sigma):
    g = (3, 5)
    lhs = gaussian_filter_predict(a * d1 + b * d2, g, sigma)
    rhs = a * gaussian_filter_predict(d1, g, sigma) + b * gaussian_filter_predict(d2, g, sigma)
    assert lhs == pytest.approx(rhs, rel=1e-4)


@settings(max_examples=50, deadline=None)
@given(maps, st.floats(0.3, 4), st.integers(0, 7), st.integers(0, 7))
def test_filter_stays_in_window_range(d, sigma, r, c):
    d = d.copy()
    d[::3, ::2] = 0.0
    k = int(np.ceil(3 * sigma))
    win = d[max(0, r - k):r + k + 1, max(0, c - k):c + k + 1]
    valid = win[win != 0.0]
    out = gaussian_filter_predict(d, (r, c), sigma)
    if valid.size:
        assert valid.min() - 1e-9 <= out <= valid.max() + 1e-9


def test_bias_hand_example():
    b = estimate_bias([10.0, 12.0, 14.0], [9.0, 11.0, 13.0])
    assert b == BiasEstimate(1.0, 3)
    corrected = apply_bias([10.0, 12.0, 14.0], b)
    assert np.mean(corrected - np.array([9.0, 11.0, 13.0])) == 0.0
    with pytest.raises(ValueError):
        estimate_bias([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
def test_bias_correction_zeroes_mean_error(pairs):
    p, z = (np.array(c) for c in zip(*pairs))
    assert abs(np.mean(apply_bias(p, estimate_bias(p, z)) - z)) < 1e-6


def test_unbiased_inputs_give_small_bias():
    rng = np.random.default_rng(2)
    z = rng.uniform(400, 700, 400)
    b = estimate_bias(z + rng.normal(0, 5, z.size), z)
    assert abs(b.offset) < 2 * 5 / np.sqrt(z.size)


def test_noise_free_sim_bias_is_minus_offset():
    cfg = sim.preset("consumer").noise_free()
    data = sim.generate_dataset(cfg, 10, 5, seed=0)
    z = np.array([s.z for s in data])
    raw = predict_raw(data)
    assert np.sqrt(np.mean((raw - z) ** 2)) == pytest.approx(15.0, abs=1e-4)
    b = estimate_bias(raw, z)
    assert b.offset == pytest.approx(-15.0, abs=1e-4)
    np.testing.assert_allclose(apply_bias(raw, b), z, atol=1e-4)


def test_sigma_scaling_and_selection():
    assert scaled_sigma(13, 416) == 13
    assert scaled_sigma(13, 64) == pytest.approx(2.0)
    data = sim.generate_dataset(sim.preset("consumer"), 5, 4, seed=0)
    assert select_filter_sigma(data) in (5.0, 9.0, 13.0, 17.0)


def test_smooth_map_matches_pointwise_filter_away_from_borders():
    rng = np.random.default_rng(4)
    d = rng.uniform(400, 700, (20, 20))
    d[rng.random(d.shape) < 0.1] = 0.0
    m = smooth_map(d, 1.5)
    assert m[10, 10] == pytest.approx(gaussian_filter_predict(d, (10, 10), 1.5), rel=1e-3)


def test_autoencoder_supervises_every_pixel():
    data = sim.generate_dataset(sim.preset("consumer"), 2, 1, seed=0)
    cfg = NetConfig(encoder_channels=(4, 8, 8), decoder_channels=(8, 8, 4), sensor_skip=False)
    model, log = train_autoencoder(data, cfg, RunConfig(steps=2, batch_size=2), seed=0)
    assert log.records[0].keys() == {"step", "j_z", "ms"}
    # dense L2 reaches every output pixel, the poke loss only the poked one
    x_rgb, x_d = model.prepare_inputs(np.stack([s.rgb for s in data]), np.stack([s.depth for s in data]))
    out = ad.parameter(model.forward_prepared(x_rgb, x_d).depth.data)
    target = fill_invalid(np.stack([s.depth for s in data]))
    ad.backward(ad.mean(ad.square(out - ad.Tensor(target))))
    assert np.all(out.grad != 0)
    sparse = ad.parameter(out.data.copy())
    rows, cols = np.array([s.g[0] for s in data]), np.array([s.g[1] for s in data])
    ad.backward(depth_loss(ad.gather_pixels(sparse, rows, cols), [s.y for s in data], [s.z for s in data]))
    assert np.count_nonzero(sparse.grad) == len(data)
