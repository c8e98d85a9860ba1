"""
Training a depth-by-poking model
================================

Train a small RGB-D network on single-pixel poke labels, then look at its
errors, its calibration and what happens when uncertain pokes are dropped.
Run with ``python notebooks/03_train_and_evaluate.py`` (a few minutes; raise
STEPS for better numbers).
"""

import numpy as np

from pokedepth import baselines as bl
from pokedepth import sim
from pokedepth.cli import model_predictions
from pokedepth.dataset import split
from pokedepth.evaluation import discard_curve, qq_points, rmse_at_pokes, studentize
from pokedepth.objectives import LossConfig
from pokedepth.trainer import RunConfig, train_one

STEPS = 800

data = sim.generate_dataset(sim.preset("consumer"), 400, 3, seed=1)
train, test = split(data, 0.9, seed=0)
z = np.array([s.z for s in test])

# The loss only sees the prediction at the poked pixel.  Successful grasps
# weigh 1, failed ones 0.25: a failed grasp retracts at a less reliable depth.
# In moments mode a second head regresses the squared residual.
cfg = RunConfig(steps=STEPS, batch_size=16, augment=True,
                loss=LossConfig(mode="moments", lambda_plus=1.0, lambda_minus=0.25))


def progress(step, comps):
    if step % 200 == 0:
        print(f"  step {step}: " + ", ".join(f"{k}={v:.4g}" for k, v in comps.items()))


model, log = train_one(cfg, seed=0, samples=train, progress=progress)
pred, var = model_predictions(model, test)

raw = bl.predict_raw(test)
raw_bc = bl.apply_bias(raw, bl.estimate_bias(bl.predict_raw(train), np.array([s.z for s in train])))
print("\nRMSE at poke points (mm): raw %.1f, raw-bc %.1f, model %.1f"
      % (rmse_at_pokes(raw, z), rmse_at_pokes(raw_bc, z), rmse_at_pokes(pred, z)))

# If the variance head is calibrated, residuals divided by the predicted
# standard deviation look like draws from a unit normal.
s = studentize(pred, z, var)
t, e = qq_points(s)
print("studentized residuals: mean %+.2f, std %.2f" % (s.mean(), s.std()))
print("Q-Q at the quartiles: theory %+.2f / %+.2f, observed %+.2f / %+.2f"
      % (t[len(t) // 4], t[3 * len(t) // 4], e[len(e) // 4], e[3 * len(e) // 4]))

# Keep only the pokes the model is most sure about.
for frac, rmse in discard_curve(pred - z, var):
    print("  keep %3.0f%%  rmse %5.1f mm" % (100 * frac, rmse))
