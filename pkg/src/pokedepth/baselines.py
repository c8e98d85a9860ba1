"""Comparison predictors: raw sensor, Gaussian-filtered sensor, bias
correction, and a depth-reconstruction autoencoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .net import INVALID_DEPTH, DepthNet, NetConfig
from .sim import PokeSample

DEFAULT_FILTER_SIGMA = 13.0
FILTER_SWEEP = (5.0, 9.0, 13.0, 17.0)
# filter widths are quoted for captures roughly this wide; they shrink with the image
REFERENCE_WIDTH = 416


class SensorError(ValueError):
    """The sensor image carries no usable depth."""


@dataclass(frozen=True)
class BiasEstimate:
    offset: float   # mean(prediction - label), mm
    count: int


def scaled_sigma(sigma: float, width: int, reference_width: int = REFERENCE_WIDTH) -> float:
    """Convert a filter width quoted at capture resolution to ``width`` pixels."""
    return sigma * width / reference_width


def _nearest_valid(depth: np.ndarray, g) -> float:
    valid = depth != INVALID_DEPTH
    if not valid.any():
        raise SensorError("depth image has no valid pixels")
    r, c = g
    if valid[r, c]:
        return float(depth[r, c])
    rr, cc = np.nonzero(valid)
    d2 = (rr - r) ** 2 + (cc - c) ** 2
    i = int(np.argmin(d2))  # first in row-major order among equally near pixels
    return float(depth[rr[i], cc[i]])


def raw_sensor_predict(depth: np.ndarray, g) -> float:
    """Sensor depth at ``g``, falling back to the nearest valid pixel."""
    return _nearest_valid(np.asarray(depth), (int(g[0]), int(g[1])))


def gaussian_filter_predict(depth: np.ndarray, g, sigma: float) -> float:
    """Gaussian-weighted mean of the valid pixels around ``g``.

    The kernel is truncated at ``3 * sigma`` and renormalised over the valid
    pixels it covers; if none are valid the raw-sensor fallback is used.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    depth = np.asarray(depth)
    r, c = int(g[0]), int(g[1])
    k = int(np.ceil(3 * sigma))
    r0, r1 = max(0, r - k), min(depth.shape[0], r + k + 1)
    c0, c1 = max(0, c - k), min(depth.shape[1], c + k + 1)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dist2 = ((yy - r) ** 2 + (xx - c) ** 2).astype(np.float64)
    weights = np.exp(-dist2 / (2 * sigma * sigma))
    weights[dist2 > (3 * sigma) ** 2] = 0.0
    patch = depth[r0:r1, c0:c1].astype(np.float64)
    weights = weights * (patch != INVALID_DEPTH)
    total = weights.sum()
    if total <= 0:
        return raw_sensor_predict(depth, (r, c))
    return float((weights * patch).sum() / total)


def estimate_bias(predictions, labels) -> BiasEstimate:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.size < 1 or predictions.shape != labels.shape:
        raise ValueError("need at least one (prediction, label) pair of matching shape")
    return BiasEstimate(float(np.mean(predictions - labels)), int(predictions.size))


def apply_bias(predictions, bias: BiasEstimate | float):
    offset = bias.offset if isinstance(bias, BiasEstimate) else float(bias)
    return np.asarray(predictions, dtype=np.float64) - offset


# ---------------------------------------------------------------------------
# Batch helpers over poke samples
# ---------------------------------------------------------------------------

def predict_raw(samples: Sequence[PokeSample]) -> np.ndarray:
    return np.array([raw_sensor_predict(s.depth, s.g) for s in samples])


def predict_filtered(samples: Sequence[PokeSample], sigma: float) -> np.ndarray:
    return np.array([gaussian_filter_predict(s.depth, s.g, sigma) for s in samples])


def select_filter_sigma(train: Sequence[PokeSample], widths=FILTER_SWEEP) -> float:
    """Pick the sweep width (capture-resolution units) with the lowest bias-corrected train RMSE."""
    z = np.array([s.z for s in train])
    width = train[0].depth.shape[1]
    best, best_rmse = None, np.inf
    for w in widths:
        pred = predict_filtered(train, scaled_sigma(w, width))
        err = apply_bias(pred, estimate_bias(pred, z)) - z
        rmse = float(np.sqrt(np.mean(err ** 2)))
        if rmse < best_rmse:
            best, best_rmse = w, rmse
    return best


# ---------------------------------------------------------------------------
# Autoencoder
# ---------------------------------------------------------------------------

def train_autoencoder(samples: Sequence[PokeSample], net_config: NetConfig, run_config=None, seed: int = 0):
    """Train the depth network to reconstruct the (hole-filled) sensor image.

    Every pixel is supervised, in contrast to the single poked pixel of the
    depth-by-poking objectives.  The sensor skip is switched off: with it the
    untrained network already reproduces its input.  Returns ``(model, log)``.
    """
    from .trainer import RunConfig, train_one

    if not samples:
        raise ValueError("empty dataset")
    net_config = dataclasses.replace(net_config, sensor_skip=False)
    cfg = run_config or RunConfig(net=net_config)
    cfg = cfg.replace(net=net_config, objective="autoencoder")
    return train_one(cfg, seed, samples)


def autoencoder_predict(model: DepthNet, rgb, depth, g) -> float:
    z, _ = model.predict_at(rgb, depth, g)
    return z


def reconstruction_map(model: DepthNet, rgb, depth) -> np.ndarray:
    return model.forward(rgb, depth).depth.data


def smooth_map(depth: np.ndarray, sigma: float) -> np.ndarray:
    """Validity-renormalised Gaussian filter of a whole map (for plotting)."""
    valid = (depth != INVALID_DEPTH).astype(np.float64)
    num = ndimage.gaussian_filter(depth * valid, sigma, mode="constant", truncate=3.0)
    den = ndimage.gaussian_filter(valid, sigma, mode="constant", truncate=3.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, INVALID_DEPTH)
