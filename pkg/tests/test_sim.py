import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pokedepth import sim
from pokedepth.baselines import predict_raw
from pokedepth.evaluation import rmse_at_pokes
from pokedepth.sim import Material, SensorModel, SimulatorConfig


def empty_bin(**kw):
    return SimulatorConfig(min_objects=0, max_objects=0, **kw)


def test_empty_scene_is_flat_matte_floor():
    scene = sim.generate_scene(empty_bin(), 3)
    assert scene.object_count == 0
    assert np.all(scene.depth == 700.0)
    assert np.all(scene.material == Material.MATTE)


def test_box_top_face_depth():
    cfg = SimulatorConfig(min_objects=1, max_objects=1, cylinder_prob=0.0, floor_depth=600.0,
                          box_height_range=(100.0, 100.0))
    scene = sim.generate_scene(cfg, 11)
    assert scene.object_count == 1
    assert set(np.unique(scene.depth)) == {500.0, 600.0}


@pytest.mark.parametrize("name", sorted(sim.PRESETS))
def test_scene_invariants(name):
    cfg = sim.preset(name)
    for seed in range(5):
        scene = sim.generate_scene(cfg, seed)
        assert np.all((scene.depth >= cfg.camera_min) & (scene.depth <= cfg.floor_depth))
        assert scene.rgb.shape == (64, 64, 3) and scene.rgb.min() >= 0 and scene.rgb.max() <= 1
        assert set(np.unique(scene.material)) <= {int(m) for m in Material}


def test_scene_determinism_and_seed_sensitivity():
    cfg = sim.preset("adversarial")
    assert sim.generate_scene(cfg, 5).digest() == sim.generate_scene(cfg, 5).digest()
    digests = {sim.generate_scene(cfg, s).digest() for s in range(20)}
    assert len(digests) == 20


def test_unsatisfiable_placement_is_flagged():
    cfg = SimulatorConfig(min_objects=5, max_objects=5, cylinder_prob=0.0, camera_min=650.0,
                          box_height_range=(40.0, 40.0), placement_retries=3,
                          box_size_range=(60, 64))
    scene = sim.generate_scene(cfg, 0)
    assert scene.placement_failed
    assert scene.object_count < 5


def test_noise_free_sensor_is_exact():
    cfg = sim.preset("adversarial").noise_free()
    scene = sim.generate_scene(cfg, 2)
    np.testing.assert_array_equal(sim.render_sensor(scene, cfg, 9), scene.depth)


def test_matte_sensor_noise_std():
    cfg = empty_bin(sensor={n: SensorModel(noise_std=5.0) for n in ("matte", "shiny", "transparent", "mirror")})
    scene = sim.generate_scene(cfg, 0)
    err = np.concatenate([(sim.render_sensor(scene, cfg, s) - scene.depth).ravel() for s in range(3)])
    assert err.size >= 10_000
    assert 4.0 <= err.std() <= 6.0


def test_mirror_gross_errors_stay_in_range():
    cfg = sim.adversarial_preset()
    cfg.sensor["mirror"] = SensorModel(noise_std=0.0, gross_error_prob=1.0, gross_error_range=(300.0, 5000.0))
    cfg.invalid_pixel_prob = 0.0
    cfg.material_probs = {"matte": 0.0, "shiny": 0.0, "transparent": 0.0, "mirror": 1.0}
    for seed in range(5):
        scene = sim.generate_scene(cfg, seed)
        d = sim.render_sensor(scene, cfg, seed)
        mirror = scene.material == Material.MIRROR
        err = np.abs(d[mirror].astype(np.float64) - scene.depth[mirror])
        assert mirror.any()
        assert np.all((err >= 300.0 - 1e-3) & (err <= 5000.0 + 1e-3))
        assert np.all(d > 0)  # errors never push a surface behind the camera


def test_gross_error_rate_matches_config():
    p = 0.3
    cfg = empty_bin(sensor={n: SensorModel(gross_error_prob=p, gross_error_range=(50.0, 60.0))
                            for n in ("matte", "shiny", "transparent", "mirror")})
    scene = sim.generate_scene(cfg, 0)
    hits = np.concatenate([(sim.render_sensor(scene, cfg, s) != scene.depth).ravel() for s in range(3)])
    n = hits.size
    assert abs(hits.mean() - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_invalid_pixels_are_zero():
    cfg = empty_bin(invalid_pixel_prob=0.2)
    scene = sim.generate_scene(cfg, 0)
    d = sim.render_sensor(scene, cfg, 1)
    frac = np.mean(d == 0.0)
    assert 0.17 < frac < 0.23
    assert np.all(d[d != 0.0] == 700.0)


def test_noise_free_poke_label_is_depth_plus_offset():
    cfg = sim.preset("consumer").noise_free()
    for s in range(50):
        scene = sim.generate_scene(cfg, s % 5)
        poke = sim.sample_poke(scene, cfg, s)
        assert poke.z == scene.depth[poke.g] + 15.0
        np.testing.assert_array_equal(poke.depth, scene.depth)


def test_flat_matte_success_rate():
    cfg = empty_bin()
    scene = sim.generate_scene(cfg, 0)
    ys = np.array([sim.sample_poke(scene, cfg, s).y for s in range(10_000)])
    assert abs(ys.mean() - cfg.base_success_rate) < 0.03


def test_label_noise_conditioned_on_outcome():
    cfg = empty_bin(sigma_success=5.0, sigma_fail=20.0, base_success_rate=0.5)
    scene = sim.generate_scene(cfg, 0)
    pokes = [sim.sample_poke(scene, cfg, s) for s in range(10_000)]
    noise = np.array([p.z - scene.depth[p.g] - 15.0 for p in pokes])
    y = np.array([p.y for p in pokes])
    assert noise[y == 1].std() == pytest.approx(5.0, rel=0.2)
    assert noise[y == 0].std() == pytest.approx(20.0, rel=0.2)


def test_success_probability_lower_on_rough_and_transparent():
    cfg = sim.preset("adversarial")
    flat = sim.generate_scene(empty_bin(), 0)
    p_flat = sim.success_probability(flat, cfg, (32, 32))
    glass = sim.Scene(depth=flat.depth.copy(), material=np.full((64, 64), Material.TRANSPARENT, np.uint8),
                      rgb=flat.rgb, object_count=0)
    assert sim.success_probability(glass, cfg, (32, 32)) < p_flat
    step = flat.depth.copy()
    step[:, 32:] -= 50.0
    edge = sim.Scene(depth=step, material=flat.material, rgb=flat.rgb, object_count=1)
    assert sim.success_probability(edge, cfg, (32, 32)) < p_flat


def test_outliers_retract_early():
    cfg = empty_bin(outlier_prob=1.0)
    scene = sim.generate_scene(cfg, 0)
    shift = np.array([scene.depth[p.g] + 15.0 - p.z for p in (sim.sample_poke(scene, cfg, s) for s in range(200))])
    assert np.all((shift >= 50.0 - 1e-3) & (shift <= 300.0 + 1e-3))


def test_dataset_size_and_determinism():
    cfg = sim.preset("consumer")
    a = sim.generate_dataset(cfg, 2, 3, seed=4)
    b = sim.generate_dataset(cfg, 2, 3, seed=4)
    assert len(a) == 6
    for x, y in zip(a, b):
        assert x.g == y.g and x.y == y.y and x.z == y.z
        np.testing.assert_array_equal(x.depth, y.depth)
    assert all(s.ground_truth is None for s in a)


def test_adversarial_raw_error_is_much_larger():
    rmse = {}
    for name in ("consumer", "adversarial"):
        data = sim.generate_dataset(sim.preset(name), 100, 5, seed=0)
        rmse[name] = rmse_at_pokes(predict_raw(data), [s.z for s in data])
    assert rmse["adversarial"] >= 5 * rmse["consumer"]


def test_compliance_bias_on_noisy_sensor():
    cfg = empty_bin(sensor={n: SensorModel(noise_std=4.0) for n in ("matte", "shiny", "transparent", "mirror")},
                    sigma_success=3.0, sigma_fail=8.0)
    data = sim.generate_dataset(cfg, 20, 100, seed=1)
    succ = [s for s in data if s.y == 1]
    gap = np.array([s.z - s.depth[s.g] for s in succ])
    assert abs(gap.mean() - 15.0) < 2 * 5.0 / np.sqrt(len(gap))


def test_config_validation():
    with pytest.raises(ValueError):
        SimulatorConfig(sigma_success=5.0, sigma_fail=2.0).validate()
    with pytest.raises(ValueError):
        SimulatorConfig(sensor={"matte": SensorModel(gross_error_range=(0.0, 6000.0))}).validate()
    with pytest.raises(ValueError):
        sim.preset("nope")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_poke_pixel_in_bounds(seed):
    cfg = sim.preset("adversarial")
    scene = sim.generate_scene(cfg, seed)
    poke = sim.sample_poke(scene, cfg, seed)
    assert 0 <= poke.g[0] < 64 and 0 <= poke.g[1] < 64
    assert poke.y in (0, 1) and np.isfinite(poke.z)
