"""
A tour of the simulated poking cell
===================================

Run with ``python notebooks/01_simulated_cell.py``.  Takes a few seconds.
"""

# A scene is a bin seen from straight above: a floor at 700 mm with boxes
# and lying cylinders on it.  Each object has a material, and the material
# decides how badly the structured-light sensor misreads it.
import numpy as np

from pokedepth import sim

cfg = sim.preset("consumer")
scene = sim.generate_scene(cfg, seed=0)
print("depth range in the bin: %.0f .. %.0f mm" % (scene.depth.min(), scene.depth.max()))
print("materials present:", sorted(sim.Material(m).name.lower() for m in np.unique(scene.material)))

# The sensor image is the true depth plus per-material noise, occasional
# gross errors, and a few invalid (zero) pixels.
sensor = sim.render_sensor(scene, cfg, seed=0)
valid = sensor > 0
err = (sensor - scene.depth)[valid]
print("sensor error on valid pixels: mean %+.1f mm, std %.1f mm, %d invalid pixels"
      % (err.mean(), err.std(), (~valid).sum()))

# Datasets are tuples (rgb, depth, g, y, z): a poke at pixel g, whether the
# suction grasp succeeded, and the tooltip depth where the arm stopped.  The
# tooltip travels about 15 mm past the surface, so labels sit below it.
data = sim.generate_dataset(cfg, n_scenes=200, pokes_per_scene=5, seed=1, include_ground_truth=True)
z = np.array([s.z for s in data])
surface = np.array([s.ground_truth[s.g] for s in data])
y = np.array([s.y for s in data])
print("label - surface: %.1f mm on average (success rate %.2f)" % ((z - surface).mean(), y.mean()))

# Sensor error at the poke pixels, by material, for both presets.  The
# adversarial preset swaps most of the goods for glass and mirrors.
for name in ("consumer", "adversarial"):
    data = sim.generate_dataset(sim.preset(name), 200, 5, seed=1, include_ground_truth=True)
    mats = np.array([s.material[s.g] for s in data])
    gap = np.array([s.depth[s.g] - s.ground_truth[s.g] for s in data])
    ok = np.array([s.depth[s.g] > 0 for s in data])
    print(f"\n{name}")
    for m in np.unique(mats):
        sel = (mats == m) & ok
        print("  %-12s n=%4d  rmse %7.1f mm" % (sim.Material(m).name.lower(), sel.sum(),
                                                np.sqrt(np.mean(gap[sel] ** 2))))
