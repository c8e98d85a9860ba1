"""
Sensor baselines
================

Raw readout, Gaussian filtering and a constant bias correction, evaluated at
the poke pixels of a held-out split.  Run with
``python notebooks/02_sensor_baselines.py`` (under a minute).
"""

import numpy as np

from pokedepth import baselines as bl
from pokedepth import sim
from pokedepth.dataset import split
from pokedepth.evaluation import mean_signed_error, rmse_at_pokes

for name in ("consumer", "adversarial"):
    data = sim.generate_dataset(sim.preset(name), 300, 5, seed=1)
    train, test = split(data, 0.9, seed=0)
    z_train = np.array([s.z for s in train])
    z_test = np.array([s.z for s in test])
    print(f"\n{name}: {len(train)} train / {len(test)} test pokes")

    # Raw readout.  The tooltip travels past the surface, so the sensor reads
    # shallower than the label: the mean signed error is negative, pulled
    # away from -15 mm by shiny surfaces that read too deep.
    raw = bl.predict_raw(test)
    print("  raw      rmse %7.1f  mean error %+6.1f" % (rmse_at_pokes(raw, z_test), mean_signed_error(raw, z_test)))

    # The bias is fitted on the training split only and subtracted.
    b = bl.estimate_bias(bl.predict_raw(train), z_train)
    raw_bc = bl.apply_bias(raw, b)
    print("  raw-bc   rmse %7.1f  (b = %+.1f mm)" % (rmse_at_pokes(raw_bc, z_test), b.offset))

    # Filter widths are swept on the training split.  Widths are quoted in
    # pixels of a 416-px image and scaled down to our 64-px images.
    sigma = bl.select_filter_sigma(train)
    px = bl.scaled_sigma(sigma, test[0].depth.shape[1])
    gf, gf_train = bl.predict_filtered(test, px), bl.predict_filtered(train, px)
    gf_bc = bl.apply_bias(gf, bl.estimate_bias(gf_train, z_train))
    print("  gf       rmse %7.1f  (sigma %g -> %.2f px)" % (rmse_at_pokes(gf, z_test), sigma, px))
    print("  gf-bc    rmse %7.1f" % rmse_at_pokes(gf_bc, z_test))

# Filtering helps against isolated gross errors but not against a mirror,
# where most of the pixels under the kernel are wrong together.  On the
# consumer preset the narrowest filter already blurs object edges, so the
# raw readout wins there.  Small test splits make these numbers noisy.
