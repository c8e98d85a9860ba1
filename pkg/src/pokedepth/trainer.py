"""Training loop, run configuration and multi-seed runs."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .net import DepthNet, NetConfig, build_model, fill_invalid, load_checkpoint, save_checkpoint
from .objectives import LossConfig, Mode, objective
from .sim import PokeSample

OBJECTIVES = ("dbp", "autoencoder")
LOG_COLUMNS = ("step", "j_z", "j_v", "j_n", "j_m", "ms")

# named RNG streams derived from the run seed
STREAM_INIT = 0x1A17
STREAM_SHUFFLE = 0x5F
STREAM_AUGMENT = 0xA6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    # "constant", or "cosine": anneal to lr * lr_floor over the run
    schedule: str = "constant"
    lr_floor: float = 0.02

    def lr_at(self, step: int, steps: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            t = (step - 1) / max(steps - 1, 1)
            return self.lr * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + np.cos(np.pi * t)))
        raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 16
    steps: int = 5000
    checkpoint_every: int = 0          # 0: only the final checkpoint
    # train on randomly flipped / rotated copies; the camera looks straight down,
    # so these are physically valid scenes with the same labels
    augment: bool = False
    # in moments mode, J_V trains only the variance head on frozen features;
    # its mm^4 scale otherwise swamps the depth gradient in the shared trunk
    isolate_variance: bool = True
    seeds: tuple[int, ...] = (0,)
    objective: str = "dbp"
    out_dir: str | None = None
    train_data: str | None = None
    test_data: str | None = None
    train_fraction: float = 0.9
    split_seed: int = 0

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.optim.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.optim.schedule!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        self.net.validate()
        self.loss.validate()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _optional_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


def _optional_str(text: str):
    return None if text.strip().lower() in ("none", "") else text.strip()


# key -> (section, field, parser); section None means a RunConfig field
_KEYS = {
    "net.input_height": ("net", "input_height", int),
    "net.input_width": ("net", "input_width", int),
    "net.encoder_channels": ("net", "encoder_channels", _ints),
    "net.decoder_channels": ("net", "decoder_channels", _ints),
    "net.rgb_only": ("net", "rgb_only", _bool),
    "net.depth_scale": ("net", "depth_scale", float),
    "net.sensor_skip": ("net", "sensor_skip", _bool),
    "net.depth_center": ("net", "depth_center", float),
    "net.depth_input_scale": ("net", "depth_input_scale", float),
    "net.variance_scale": ("net", "variance_scale", float),
    "loss.lambda_plus": ("loss", "lambda_plus", float),
    "loss.lambda_minus": ("loss", "lambda_minus", float),
    "loss.lambda_v": ("loss", "lambda_v", float),
    "loss.mode": ("loss", "mode", Mode),
    "loss.weighted_loglik": ("loss", "weighted_loglik", _bool),
    "optim.lr": ("optim", "lr", float),
    "optim.beta1": ("optim", "beta1", float),
    "optim.beta2": ("optim", "beta2", float),
    "optim.eps": ("optim", "eps", float),
    "optim.max_grad_norm": ("optim", "max_grad_norm", _optional_float),
    "optim.schedule": ("optim", "schedule", str.strip),
    "optim.lr_floor": ("optim", "lr_floor", float),
    "train.batch_size": (None, "batch_size", int),
    "train.steps": (None, "steps", int),
    "train.checkpoint_every": (None, "checkpoint_every", int),
    "train.augment": (None, "augment", _bool),
    "train.isolate_variance": (None, "isolate_variance", _bool),
    "train.seeds": (None, "seeds", _ints),
    "train.objective": (None, "objective", str.strip),
    "train.out_dir": (None, "out_dir", _optional_str),
    "data.train": (None, "train_data", _optional_str),
    "data.test": (None, "test_data", _optional_str),
    "data.train_fraction": (None, "train_fraction", float),
    "data.split_seed": (None, "split_seed", int),
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a RunConfig."""
    sections: dict[str | None, dict] = {"net": {}, "loss": {}, "optim": {}, None: {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        section, name, conv = _KEYS[key]
        try:
            sections[section][name] = conv(value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None

    base = base or RunConfig()
    net = dataclasses.replace(base.net, **sections["net"])
    loss = dataclasses.replace(base.loss, **sections["loss"])
    optim = dataclasses.replace(base.optim, **sections["optim"])
    return base.replace(net=net, loss=loss, optim=optim, **sections[None])


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, step: int, components: dict[str, float], ms: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append({"step": step, **components, "ms": ms})

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=float)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r["step"]] + [repr(r[c]) if c in r else "" for c in LOG_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                comps = {c: float(row[c]) for c in LOG_COLUMNS[1:-1] if row[c] != ""}
                log.append(int(row["step"]), comps, float(row["ms"]))
        return log


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    """Network-layout arrays for a list of samples, built once per run."""

    x_rgb: np.ndarray
    x_d: np.ndarray | None
    target: np.ndarray | None     # hole-filled sensor depth, autoencoder only
    rows: np.ndarray
    cols: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __len__(self) -> int:
        return len(self.z)

    def take(self, idx: np.ndarray, codes: np.ndarray | None = None) -> "PreparedData":
        """Batch ``idx``, each sample optionally moved by a symmetry of the square (see :func:`transform`)."""
        parts = [self.x_rgb[idx], None if self.x_d is None else self.x_d[idx],
                 None if self.target is None else self.target[idx]]
        rows, cols = self.rows[idx].copy(), self.cols[idx].copy()
        if codes is not None:
            height, width = self.x_rgb.shape[2:]
            for j, code in enumerate(codes):
                for a in parts:
                    if a is not None:
                        a[j] = transform(a[j], code)
                rows[j], cols[j] = transform_pixel(rows[j], cols[j], code, height, width)
        return PreparedData(parts[0], parts[1], parts[2], rows, cols, self.y[idx], self.z[idx])


def transform(a: np.ndarray, code: int) -> np.ndarray:
    """Mirror the last axis if ``code >= 4``, then rotate ``code % 4`` quarter turns."""
    if code >= 4:
        a = a[..., ::-1]
    return np.rot90(a, code % 4, axes=(-2, -1))


def transform_pixel(row: int, col: int, code: int, height: int, width: int) -> tuple[int, int]:
    if code >= 4:
        col = width - 1 - col
    for _ in range(code % 4):
        # one counter-clockwise quarter turn of an (h, w) image
        row, col = width - 1 - col, row
        height, width = width, height
    return row, col


def symmetry_codes(rng: np.random.Generator, n: int, height: int, width: int) -> np.ndarray:
    """Random dihedral symmetries; quarter turns only when the image is square."""
    allowed = np.arange(8) if height == width else np.array([0, 2, 4, 6])
    return rng.choice(allowed, size=n)


def prepare(samples: Sequence[PokeSample], model: DepthNet, dense_target: bool = False) -> PreparedData:
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    x_rgb, x_d = model.prepare_inputs(rgb, None if model.config.rgb_only else depth)
    target = fill_invalid(depth).astype(np.float32) if dense_target else None
    return PreparedData(
        x_rgb=x_rgb, x_d=x_d, target=target,
        rows=np.array([s.g[0] for s in samples], dtype=np.intp),
        cols=np.array([s.g[1] for s in samples], dtype=np.intp),
        y=np.array([s.y for s in samples], dtype=np.int64),
        z=np.array([s.z for s in samples], dtype=np.float64),
    )


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches for ``steps`` steps: reshuffle at each epoch, drop no samples."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_SHUFFLE]))
    out: list[np.ndarray] = []
    order = np.empty(0, dtype=np.intp)
    while len(out) < steps:
        if order.size == 0:
            order = rng.permutation(n)
        out.append(order[:batch_size])
        order = order[batch_size:]
    return out


def _step_loss(model: DepthNet, batch: PreparedData, cfg: RunConfig):
    if cfg.objective == "autoencoder":
        pred = model.forward_prepared(batch.x_rgb, batch.x_d)
        err = pred.depth - ad.Tensor(batch.target)
        loss = ad.mean(ad.square(err))
        return loss, {"j_z": loss.item()}
    isolate = cfg.isolate_variance and cfg.loss.mode is Mode.MOMENTS
    pred = model.forward_at(batch.x_rgb, batch.x_d, batch.rows, batch.cols, isolate)
    return objective(pred.depth, pred.variance, batch.y, batch.z, cfg.loss)


def _initial_model(cfg: RunConfig, seed: int, samples: Sequence[PokeSample]) -> DepthNet:
    net_cfg = dataclasses.replace(cfg.net, seed=int(seed))
    skip = net_cfg.sensor_skip and not net_cfg.rgb_only
    if cfg.objective == "autoencoder":
        valid = np.concatenate([s.depth[s.depth > 0] for s in samples])
        return build_model(net_cfg, head_offset=0.0 if skip else float(valid.mean()))
    z = np.array([s.z for s in samples], dtype=np.float64)
    if skip:
        sensor = np.array([fill_invalid(s.depth)[s.g] for s in samples], dtype=np.float64)
        gap = z - sensor
        # median and MAD so that gross sensor errors do not set the starting point
        offset = float(np.median(gap))
        spread = float((1.4826 * np.median(np.abs(gap - offset))) ** 2)
    else:
        offset, spread = float(z.mean()), float(np.var(z))
    return build_model(net_cfg, head_offset=offset, mean_variance=max(spread, 1.0))


def checkpoint_path(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed{seed}.dbpc"


def train_one(cfg: RunConfig, seed: int, samples: Sequence[PokeSample], progress=None):
    """Train one network from ``seed``; returns ``(model, log)``.

    Each step runs the batch forward, gathers the prediction at every
    sample's poke pixel, builds the configured objective, backpropagates and
    applies one Adam update.  With ``cfg.out_dir`` set, checkpoints are
    written every ``checkpoint_every`` steps and at the end.  A non-finite
    loss or gradient raises :class:`TrainingDiverged`; the last checkpoint on
    disk is then the last good state.
    """
    if not samples:
        raise ValueError("empty training set")
    cfg.validate()
    model = _initial_model(cfg, seed, samples)
    data = prepare(samples, model, dense_target=cfg.objective == "autoencoder")
    opt = ad.Adam(model.params, lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                  eps=cfg.optim.eps, max_grad_norm=cfg.optim.max_grad_norm)
    ckpt = checkpoint_path(cfg.out_dir, seed) if cfg.out_dir else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)

    aug_rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_AUGMENT]))
    height, width = data.x_rgb.shape[2:]
    log = TrainLog()
    for step, idx in enumerate(batch_schedule(len(data), cfg.batch_size, cfg.steps, seed), 1):
        t0 = time.perf_counter()
        codes = symmetry_codes(aug_rng, len(idx), height, width) if cfg.augment else None
        opt.lr = cfg.optim.lr_at(step, cfg.steps)
        ad.zero_grad(model.params)
        loss, comps = _step_loss(model, data.take(idx, codes), cfg)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(_diverged_message(seed, step, f"loss is {loss.item()}", ckpt))
        ad.backward(loss)
        try:
            opt.step()
        except FloatingPointError as exc:
            raise TrainingDiverged(_diverged_message(seed, step, str(exc), ckpt)) from None
        log.append(step, comps, (time.perf_counter() - t0) * 1e3)
        if ckpt is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, ckpt)
        if progress is not None:
            progress(step, comps)
    if ckpt is not None:
        save_checkpoint(model, ckpt)
        log.write_csv(ckpt.with_suffix(".csv"))
    return model, log


def _diverged_message(seed, step, why, ckpt) -> str:
    kept = f"last good checkpoint kept at {ckpt}" if ckpt and ckpt.exists() else "no checkpoint written yet"
    return f"seed {seed}: training diverged at step {step} ({why}); {kept}"


def train_multi(cfg: RunConfig, samples: Sequence[PokeSample], progress=None) -> list[tuple[int, DepthNet, TrainLog]]:
    """Independent runs, one per seed in ``cfg.seeds``."""
    return [(s, *train_one(cfg, s, samples, progress)) for s in cfg.seeds]


def load_run(out_dir, seed: int, expected: NetConfig | None = None) -> DepthNet:
    return load_checkpoint(checkpoint_path(out_dir, seed), expected)
