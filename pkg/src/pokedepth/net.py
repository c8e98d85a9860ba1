"""Dual-encoder fully-convolutional depth network.

Topology (for the default three stages)::

    RGB   -> input -> conv s2 -> conv s2 -> conv s2     (16, 32, 64 channels)
    depth -> input -> conv s2 -> conv s2 -> conv s2     (separate weights)
               |        |          |          |
              1x1      1x1        1x1        1x1        lateral projections
               +        +          +          +         RGB + depth, elementwise
               |        |          |          |
    decoder:   |        |          |     top of pyramid
               |        |          +---- convT x2, add, conv3x3
               |        +--------------- convT x2, add, conv3x3
               +------------------------ convT x2, add, conv3x3  (full resolution)
                                           |          |
                                      depth head   log-variance head   (1x1, linear)

The depth head predicts depth divided by ``depth_scale`` (for RGB-D models,
by default, the difference from the hole-filled sensor depth); the variance head
predicts log-variance in mm^2 divided by ``variance_scale``, which is scaled
back, clamped and exponentiated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor

VARIANCE_MIN = 1e-4
VARIANCE_MAX = 1e8
LOG_VARIANCE_MIN = float(np.log(VARIANCE_MIN))
LOG_VARIANCE_MAX = float(np.log(VARIANCE_MAX))
INVALID_DEPTH = 0.0

CHECKPOINT_MAGIC = b"DBPC"
CHECKPOINT_VERSION = 1

DEPTH_HEAD = ("head.depth.w", "head.depth.b")
VARIANCE_HEAD = ("head.logvar.w", "head.logvar.b")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_height: int = 64
    input_width: int = 64
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    decoder_channels: tuple[int, ...] = (32, 32, 16)
    rgb_only: bool = False
    seed: int = 0
    depth_scale: float = 1000.0
    # the depth input enters as (hole-filled depth - depth_center) / depth_input_scale
    depth_center: float = 600.0
    depth_input_scale: float = 100.0
    # RGB-D only: the depth head predicts a correction to the hole-filled sensor depth
    sensor_skip: bool = True
    # log-variance head output multiplier; lets Adam-sized steps move the
    # variance between materials within a few thousand steps
    variance_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    def validate(self) -> None:
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        if len(self.decoder_channels) != len(self.encoder_channels):
            raise ConfigError(
                f"decoder depth {len(self.decoder_channels)} must equal encoder depth "
                f"{len(self.encoder_channels)} so the output matches the input size")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ConfigError("channel counts must be positive")
        factor = 2 ** self.levels
        if self.input_height % factor or self.input_width % factor:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} not divisible by {factor} "
                f"(2**{self.levels} encoder stages)")
        if self.depth_scale <= 0 or self.depth_input_scale <= 0 or self.variance_scale <= 0:
            raise ConfigError("depth_scale, depth_input_scale and variance_scale must be positive")


class ScenePrediction(NamedTuple):
    """Dense depth (mm) and variance (mm^2) maps, ``(H, W)`` or ``(N, H, W)``."""

    depth: Tensor
    variance: Tensor


def _uniform(rng, shape, fan_in, gain):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_params(config: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    enc, dec = config.encoder_channels, config.decoder_channels
    p: dict[str, np.ndarray] = {}
    branches = [("rgb", 3)] if config.rgb_only else [("rgb", 3), ("depth", 1)]
    for name, c_in in branches:
        prev = c_in
        for lvl, c in enumerate(enc, start=1):
            p[f"{name}.enc{lvl}.w"] = _uniform(rng, (c, prev, 3, 3), prev * 9, 6.0)
            p[f"{name}.enc{lvl}.b"] = np.zeros(c)
            prev = c
        for lvl, c in enumerate((c_in,) + enc):
            # level L feeds the decoder input; level l < L joins decoder stage L-1-l,
            # level 0 being the input itself at full resolution
            width = dec[0] if lvl == config.levels else dec[config.levels - 1 - lvl]
            p[f"{name}.lat{lvl}.w"] = _uniform(rng, (width, c, 1, 1), c, 3.0)
            p[f"{name}.lat{lvl}.b"] = np.zeros(width)
    prev = dec[0]
    for i, c in enumerate(dec):
        # transposed conv: each output sees prev * (k/stride)^2 = prev * 4 inputs
        p[f"dec{i}.up.w"] = _uniform(rng, (prev, c, 4, 4), prev * 4, 6.0)
        p[f"dec{i}.up.b"] = np.zeros(c)
        p[f"dec{i}.conv.w"] = _uniform(rng, (c, c, 3, 3), c * 9, 6.0)
        p[f"dec{i}.conv.b"] = np.zeros(c)
        prev = c
    # heads start at zero so the first predictions are the bias values
    p["head.depth.w"] = np.zeros((1, prev, 1, 1))
    p["head.depth.b"] = np.zeros(1)
    p["head.logvar.w"] = np.zeros((1, prev, 1, 1))
    p["head.logvar.b"] = np.zeros(1)
    return p


def fill_invalid(depth: np.ndarray) -> np.ndarray:
    """Replace invalid (0.0) pixels of each map by the nearest valid value.

    Works on ``(H, W)`` or ``(N, H, W)``.  A map with no valid pixel is
    returned unchanged.
    """
    depth = np.asarray(depth)
    if depth.ndim == 3:
        return np.stack([fill_invalid(d) for d in depth])
    invalid = depth == INVALID_DEPTH
    if not invalid.any() or invalid.all():
        return depth
    idx = ndimage.distance_transform_edt(invalid, return_distances=False, return_indices=True)
    return depth[idx[0], idx[1]]


class DepthNet:
    """Parameters plus the forward pass of the depth/variance network."""

    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def depth_head(self) -> dict[str, Tensor]:
        return {k: self.params[k] for k in DEPTH_HEAD}

    def variance_head(self) -> dict[str, Tensor]:
        return {k: self.params[k] for k in VARIANCE_HEAD}

    def _encode(self, branch: str, x: Tensor) -> list[Tensor]:
        p = self.params
        feats = [ad.conv2d(x, p[f"{branch}.lat0.w"], p[f"{branch}.lat0.b"])]
        for lvl in range(1, self.config.levels + 1):
            x = ad.relu(ad.conv2d(x, p[f"{branch}.enc{lvl}.w"], p[f"{branch}.enc{lvl}.b"],
                                  stride=2, padding=1))
            feats.append(ad.conv2d(x, p[f"{branch}.lat{lvl}.w"], p[f"{branch}.lat{lvl}.b"]))
        return feats

    def prepare_inputs(self, rgb, depth) -> tuple[np.ndarray, np.ndarray | None]:
        """Convert ``(N, H, W, 3)`` / ``(N, H, W)`` arrays to network layout."""
        cfg = self.config
        rgb = np.asarray(rgb, dtype=np.float32)
        if rgb.ndim != 4 or rgb.shape[1:] != (cfg.input_height, cfg.input_width, 3):
            raise ad.ShapeError(
                f"RGB batch must be (N, {cfg.input_height}, {cfg.input_width}, 3), got {rgb.shape}")
        x_rgb = np.ascontiguousarray(rgb.transpose(0, 3, 1, 2))
        if cfg.rgb_only:
            return x_rgb, None
        depth = np.asarray(depth, dtype=np.float32)
        if depth.shape != rgb.shape[:3]:
            raise ad.ShapeError(f"depth batch must be {rgb.shape[:3]}, got {depth.shape}")
        x_d = (fill_invalid(depth)[:, None] - np.float32(cfg.depth_center)) / np.float32(cfg.depth_input_scale)
        return x_rgb, x_d.astype(np.float32)

    def forward(self, rgb, depth=None) -> ScenePrediction:
        """Predict depth and variance maps.

        Accepts a single image (``rgb`` of shape ``(H, W, 3)``, ``depth``
        ``(H, W)``) or a batch with a leading axis.  ``depth`` is ignored by
        RGB-only models and may be ``None`` for them.
        """
        single = np.ndim(rgb) == 3
        if single:
            rgb = np.asarray(rgb)[None]
            depth = None if depth is None else np.asarray(depth)[None]
        if depth is None and not self.config.rgb_only:
            raise ad.ShapeError("this model needs a depth image")
        x_rgb, x_d = self.prepare_inputs(rgb, depth)
        return self.forward_prepared(x_rgb, x_d, squeeze=single)

    def _pyramid(self, x_rgb: np.ndarray, x_d: np.ndarray | None) -> list[Tensor]:
        pyramid = self._encode("rgb", Tensor(x_rgb))
        if not self.config.rgb_only:
            pyramid = [a + b for a, b in zip(pyramid, self._encode("depth", Tensor(x_d)))]
        return pyramid

    def _heads(self, h: Tensor, shape, x_d_at: np.ndarray | None,
               isolate_variance: bool = False) -> ScenePrediction:
        p = self.params
        cfg = self.config
        z = ad.scale(ad.reshape(ad.conv2d(h, p["head.depth.w"], p["head.depth.b"]), shape), cfg.depth_scale)
        if cfg.sensor_skip and x_d_at is not None:
            sensor = x_d_at.reshape(shape) * cfg.depth_input_scale + cfg.depth_center
            z = z + Tensor(sensor.astype(z.data.dtype))
        if isolate_variance:
            h = ad.stop_gradient(h)
        s = ad.scale(ad.conv2d(h, p["head.logvar.w"], p["head.logvar.b"]), cfg.variance_scale)
        # clamping log-variance is the same as clamping the variance, without overflow
        s = ad.clamp(ad.reshape(s, shape), LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)
        return ScenePrediction(z, ad.exp(s))

    def forward_prepared(self, x_rgb: np.ndarray, x_d: np.ndarray | None,
                         squeeze: bool = False, isolate_variance: bool = False) -> ScenePrediction:
        cfg, p = self.config, self.params
        pyramid = self._pyramid(x_rgb, x_d)
        h = pyramid[-1]
        for i in range(cfg.levels):
            h = ad.conv_transpose2d(h, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"], stride=2)
            h = ad.relu(h + pyramid[cfg.levels - 1 - i])
            h = ad.relu(ad.conv2d(h, p[f"dec{i}.conv.w"], p[f"dec{i}.conv.b"], padding=1))

        n = x_rgb.shape[0]
        hw = (cfg.input_height, cfg.input_width)
        pred = self._heads(h, (n,) + hw, x_d, isolate_variance)
        if squeeze:
            pred = ScenePrediction(ad.reshape(pred.depth, hw), ad.reshape(pred.variance, hw))
        return pred

    def forward_at(self, x_rgb: np.ndarray, x_d: np.ndarray | None, rows, cols,
                   isolate_variance: bool = False) -> ScenePrediction:
        """Depth and variance at one pixel per image, shape ``(N,)``.

        Equal to running :meth:`forward_prepared` and gathering at
        ``(rows[i], cols[i])``, but the decoder is only evaluated on the
        windows that feed those pixels.  Window positions that fall outside
        the image are zeroed after every layer, reproducing the zero padding
        of the full-map computation.

        ``isolate_variance`` feeds the variance head a stop-gradient copy of
        the decoder features, so a loss on the variance alone trains only the
        variance head.
        """
        cfg, p = self.config, self.params
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        n = x_rgb.shape[0]
        pyramid = self._pyramid(x_rgb, x_d)

        # Walk back from the output pixel: for each decoder stage, the start
        # and size of its output window and of the window it reads.
        plan = []
        r0, c0, m = rows, cols, 1
        for i in reversed(range(cfg.levels)):
            size_in = (m + 1) // 2 + 3
            ri, ci = (r0 - 3) // 2, (c0 - 3) // 2
            plan.append((i, r0, c0, m, ri, ci, size_in))
            r0, c0, m = ri, ci, size_in
        plan.reverse()

        res_h = cfg.input_height >> cfg.levels
        res_w = cfg.input_width >> cfg.levels
        i, _, _, _, ri, ci, size_in = plan[0]
        h = ad.crop_windows(pyramid[-1], ri, ci, size_in, size_in)
        for i, r0, c0, m, ri, ci, size_in in plan:
            res_h, res_w = res_h * 2, res_w * 2
            up = ad.conv_transpose2d(h, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"], stride=2, padding=0)
            # `up` covers output rows starting at 2*ri - 1; the conv needs rows from r0 - 1
            pre = ad.crop_windows(up, r0 - 2 * ri, c0 - 2 * ci, m + 2, m + 2)
            pre = pre + ad.crop_windows(pyramid[cfg.levels - 1 - i], r0 - 1, c0 - 1, m + 2, m + 2)
            pre = ad.relu(pre) * _inside_mask(r0 - 1, c0 - 1, m + 2, res_h, res_w, pre.shape[1])
            h = ad.relu(ad.conv2d(pre, p[f"dec{i}.conv.w"], p[f"dec{i}.conv.b"]))
            if m > 1:
                h = h * _inside_mask(r0, c0, m, res_h, res_w, h.shape[1])
        x_d_at = None if x_d is None else x_d[np.arange(n), 0, rows, cols]
        return self._heads(h, (n,), x_d_at, isolate_variance)

    def predict_at(self, rgb, depth, g) -> tuple[float, float]:
        """Depth (mm) and variance (mm^2) at pixel ``g = (row, col)`` of one image."""
        row, col = int(g[0]), int(g[1])
        pred = self.forward(rgb, depth)
        z = ad.gather_pixel(pred.depth, row, col)
        v = ad.gather_pixel(pred.variance, row, col)
        return z.item(), v.item()

    def predict_batch(self, rgb, depth, rows, cols, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Depth and variance at one pixel per image for a stack of images."""
        rgb = np.asarray(rgb)
        n = rgb.shape[0]
        zs, vs = np.empty(n), np.empty(n)
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            d = None if self.config.rgb_only else depth[sl]
            x_rgb, x_d = self.prepare_inputs(rgb[sl], d)
            pred = self.forward_prepared(x_rgb, x_d)
            idx = np.arange(pred.depth.shape[0])
            zs[sl] = pred.depth.data[idx, rows[sl], cols[sl]]
            vs[sl] = pred.variance.data[idx, rows[sl], cols[sl]]
        return zs, vs


def _inside_mask(rows0, cols0, size, height, width, channels) -> Tensor:
    r = rows0[:, None] + np.arange(size)[None, :]
    c = cols0[:, None] + np.arange(size)[None, :]
    inside = ((r >= 0) & (r < height))[:, :, None] & ((c >= 0) & (c < width))[:, None, :]
    mask = np.broadcast_to(inside[:, None], (len(rows0), channels, size, size))
    return Tensor(mask)


def build_model(config: NetConfig, head_offset: float | None = None,
                mean_variance: float | None = None) -> DepthNet:
    """Randomly initialise a network.

    Kernels use fan-in scaled uniform initialisation, except for the two
    output heads whose kernels start at zero.  Biases start at zero, except
    that the depth head bias starts at ``head_offset`` (mm) and the
    log-variance head output at ``log(mean_variance)`` when given.  For a
    plain depth head ``head_offset`` is the mean label; with the sensor skip
    it is the mean gap between label and sensor reading.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A17]))
    raw = _init_params(config, rng)
    if head_offset is not None:
        raw["head.depth.b"] = np.array([head_offset / config.depth_scale])
    if mean_variance is not None:
        raw["head.logvar.b"] = np.array([np.log(max(mean_variance, VARIANCE_MIN)) / config.variance_scale])
    dtype = ad.get_default_dtype()
    params = {k: ad.parameter(v.astype(dtype)) for k, v in raw.items()}
    return DepthNet(config, params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _config_bytes(config: NetConfig) -> bytes:
    out = struct.pack("<III", config.input_height, config.input_width, config.levels)
    out += struct.pack(f"<{config.levels}I", *config.encoder_channels)
    out += struct.pack(f"<{config.levels}I", *config.decoder_channels)
    out += struct.pack("<BBQdddd", int(config.rgb_only), int(config.sensor_skip), config.seed,
                       config.depth_scale, config.depth_center, config.depth_input_scale, config.variance_scale)
    return out


def save_checkpoint(model: DepthNet, path) -> None:
    """Write parameters in the little-endian ``DBPC`` format."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += _config_bytes(model.config)
    buf += struct.pack("<I", len(model.params))
    for name, t in model.params.items():
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded)) + encoded
        buf += struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated {self.what}: ran out of bytes reading {context}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, context: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), context))


def load_checkpoint(path, expected: NetConfig | None = None) -> DepthNet:
    """Read a ``DBPC`` file; ``expected`` guards against loading into the wrong architecture."""
    r = _Reader(Path(path).read_bytes(), "checkpoint")
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a DBPC checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    h, w, levels = r.unpack("<III", "config")
    enc = r.unpack(f"<{levels}I", "encoder channels")
    dec = r.unpack(f"<{levels}I", "decoder channels")
    rgb_only, skip, seed, depth_scale, center, in_scale, var_scale = r.unpack("<BBQdddd", "config")
    config = NetConfig(h, w, enc, dec, rgb_only=bool(rgb_only), seed=seed, depth_scale=depth_scale,
                       sensor_skip=bool(skip), depth_center=center, depth_input_scale=in_scale,
                       variance_scale=var_scale)
    if expected is not None and _config_bytes(expected) != _config_bytes(config):
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected}")

    (count,) = r.unpack("<I", "parameter count")
    params: dict[str, Tensor] = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of tensor {i}")
        name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"values of {name}")
        params[name] = ad.parameter(np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after last tensor")

    reference = _init_params(config, np.random.default_rng(0))
    if set(reference) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the configured architecture")
    for k, v in reference.items():
        if v.shape != params[k].shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {params[k].shape}, expected {v.shape}")
    return DepthNet(config, params)
