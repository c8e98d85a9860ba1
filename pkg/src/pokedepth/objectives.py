"""Training objectives evaluated at the poked pixel of each sample.

All functions take per-sample tensors of shape ``(N,)``: predicted depth
``z_hat`` (mm), predicted variance ``v_hat`` (mm^2), labels ``z`` (mm) and
grasp outcomes ``y``.  Plain arrays are accepted and treated as constants.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NLL_VARIANCE_FLOOR = 1e-4


class Mode(str, enum.Enum):
    PLAIN = "plain"          # depth loss only
    MOMENTS = "moments"      # depth loss + weighted moments loss
    LOGLIK = "loglik"        # Gaussian negative log-likelihood


@dataclass
class LossConfig:
    lambda_plus: float = 1.0
    lambda_minus: float = 0.25
    lambda_v: float = 1.0
    mode: Mode = Mode.MOMENTS
    # apply the success/failure class weights inside the log-likelihood as well
    weighted_loglik: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.validate()

    def validate(self) -> None:
        if min(self.lambda_plus, self.lambda_minus, self.lambda_v) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_plus + self.lambda_minus <= 0:
            raise ValueError("lambda_plus + lambda_minus must be positive")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_1d(np.asarray(x, dtype=float)))


def residual(z_hat, z) -> Tensor:
    """Squared error ``(z_hat - z)**2`` per sample."""
    return ad.square(_t(z_hat) - _t(z))


def class_weights(y, lambda_plus: float, lambda_minus: float) -> np.ndarray:
    """Per-sample weights ``lambda_+/N_+`` for successes and ``lambda_-/N_-`` for failures.

    A class that is absent from the batch contributes nothing.
    """
    y = np.atleast_1d(np.asarray(y))
    if y.size == 0:
        raise ValueError("empty batch")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("grasp outcomes must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    w = np.zeros(y.size)
    if n_pos:
        w[y == 1] = lambda_plus / n_pos
    if n_neg:
        w[y == 0] = lambda_minus / n_neg
    return w


def depth_loss(z_hat, y, z, lambda_plus: float = 1.0, lambda_minus: float = 0.25) -> Tensor:
    """Success-weighted squared error, normalised separately per grasp outcome."""
    v = residual(z_hat, z)
    w = class_weights(y, lambda_plus, lambda_minus)
    if w.shape != v.shape:
        raise ad.ShapeError(f"{w.size} labels for {v.size} predictions")
    return ad.sum(v * Tensor(w))


def gaussian_nll(z_hat, v_hat, z, weights=None) -> Tensor:
    """Mean Gaussian negative log-likelihood (constant term dropped).

    ``mean(r**2 / (2 v) + log(v) / 2)``; gradients reach both the mean and
    the variance prediction.  The variance is floored at 1e-4 mm^2 inside
    the quadratic term only.
    """
    v_hat = _t(v_hat)
    if np.any(~(v_hat.data > 0)):
        i = int(np.flatnonzero(~(v_hat.data > 0))[0])
        raise ad.DomainError(f"predicted variance must be positive, got {v_hat.data.flat[i]} at sample {i}")
    r2 = residual(z_hat, z)
    per_sample = r2 / ad.scale(ad.clamp(v_hat, NLL_VARIANCE_FLOOR, np.inf), 2.0) + ad.scale(ad.log(v_hat), 0.5)
    if weights is None:
        return ad.mean(per_sample)
    return ad.sum(per_sample * Tensor(weights))


def moments_loss(z_hat, v_hat, z) -> Tensor:
    """Mean squared gap between predicted variance and the observed squared residual.

    The depth prediction is wrapped in a stop-gradient, so this term can
    only move the variance estimate.
    """
    target = residual(ad.stop_gradient(_t(z_hat)), z)
    return ad.mean(ad.square(target - _t(v_hat)))


def combined_loss(j_z, j_v, lambda_v: float) -> Tensor:
    return _t(j_z) + ad.scale(_t(j_v), lambda_v)


def objective(z_hat, v_hat, y, z, config: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Total loss for the configured mode and the value of each component."""
    if config.mode is Mode.LOGLIK:
        w = class_weights(y, config.lambda_plus, config.lambda_minus) if config.weighted_loglik else None
        j_n = gaussian_nll(z_hat, v_hat, z, w)
        return j_n, {"j_n": j_n.item()}
    j_z = depth_loss(z_hat, y, z, config.lambda_plus, config.lambda_minus)
    if config.mode is Mode.PLAIN:
        return j_z, {"j_z": j_z.item()}
    j_v = moments_loss(z_hat, v_hat, z)
    j_m = combined_loss(j_z, j_v, config.lambda_v)
    return j_m, {"j_z": j_z.item(), "j_v": j_v.item(), "j_m": j_m.item()}
