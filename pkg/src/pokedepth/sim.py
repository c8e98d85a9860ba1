"""Procedural bin-picking cell: scenes, structured-light sensor, poke labels.

The camera looks straight down (orthographic), so depth is the vertical
distance from the camera plane.  Objects are boxes and lying cylinders
stacked on a flat floor.  Every function here is a pure function of its
config and seed.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

# Depths are snapped to this grid so that depth + compliance offset is exact in float32.
DEPTH_QUANTUM = 1.0 / 1024.0


class Material(enum.IntEnum):
    MATTE = 0
    SHINY = 1
    TRANSPARENT = 2
    MIRROR = 3


@dataclass
class SensorModel:
    """Per-material structured-light error model (all in mm)."""

    noise_std: float = 0.0
    gross_error_prob: float = 0.0
    gross_error_range: tuple[float, float] = (0.0, 0.0)
    bias: float = 0.0

    def validate(self, name: str) -> None:
        lo, hi = self.gross_error_range
        if self.noise_std < 0:
            raise ValueError(f"sensor[{name}].noise_std must be >= 0")
        if not 0.0 <= self.gross_error_prob <= 1.0:
            raise ValueError(f"sensor[{name}].gross_error_prob must be in [0, 1]")
        if not 0.0 <= lo <= hi <= 5000.0:
            raise ValueError(f"sensor[{name}].gross_error_range must satisfy 0 <= lo <= hi <= 5000")


def _per_material(**values):
    return lambda: {m.name.lower(): values.get(m.name.lower(), 0.0) for m in Material}


@dataclass
class SimulatorConfig:
    height: int = 64
    width: int = 64
    pixel_size: float = 8.0            # mm per pixel on the floor plane
    floor_depth: float = 700.0         # mm from camera
    camera_min: float = 300.0          # nothing may come closer than this

    min_objects: int = 3
    max_objects: int = 9
    cylinder_prob: float = 0.4
    box_size_range: tuple[int, int] = (6, 18)          # px
    box_height_range: tuple[float, float] = (30.0, 160.0)  # mm
    cylinder_radius_range: tuple[float, float] = (20.0, 60.0)  # mm
    cylinder_length_range: tuple[int, int] = (10, 26)  # px
    placement_retries: int = 20
    material_probs: dict = field(default_factory=lambda: {"matte": 1.0, "shiny": 0.0,
                                                          "transparent": 0.0, "mirror": 0.0})

    sensor: dict = field(default_factory=lambda: {m.name.lower(): SensorModel() for m in Material})
    invalid_pixel_prob: float = 0.0

    compliance_offset: float = 15.0    # tooltip travel past the surface, mm
    tooltip_radius: float = 17.0       # mm
    sigma_success: float = 0.0
    sigma_fail: float = 0.0
    material_label_noise: dict = field(default_factory=_per_material())
    # per-material RGB multiplier on object albedo; makes material visible in colour
    material_tint: dict = field(default_factory=lambda: {m.name.lower(): (1.0, 1.0, 1.0) for m in Material})
    base_success_rate: float = 0.8     # on a flat matte surface
    grip_logit: dict = field(default_factory=_per_material(shiny=-0.5, transparent=-1.0, mirror=-0.3))
    roughness_penalty: float = 0.08    # logit per mm of depth spread under the tooltip
    outlier_prob: float = 0.0
    outlier_range: tuple[float, float] = (50.0, 300.0)
    object_bias: float = 0.8           # chance a poke targets an object pixel

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("image dims must be positive")
        if not 0 < self.camera_min < self.floor_depth:
            raise ValueError("need 0 < camera_min < floor_depth")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not (self.sigma_fail > self.sigma_success >= 0 or self.sigma_fail == self.sigma_success == 0):
            raise ValueError("need sigma_fail > sigma_success >= 0 (or both zero for a noise-free cell)")
        if not 0 < self.base_success_rate < 1:
            raise ValueError("base_success_rate must be in (0, 1)")
        for p in (self.invalid_pixel_prob, self.outlier_prob, self.object_bias, self.cylinder_prob):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        for name in _MATERIAL_NAMES:
            if name not in self.sensor:
                raise ValueError(f"missing sensor model for {name}")
            self.sensor[name].validate(name)
        total = sum(self.material_probs.get(n, 0.0) for n in _MATERIAL_NAMES)
        if total <= 0 or any(v < 0 for v in self.material_probs.values()):
            raise ValueError("material_probs must be non-negative with a positive sum")

    def replace(self, **changes) -> "SimulatorConfig":
        return dataclasses.replace(self, **changes)

    def noise_free(self) -> "SimulatorConfig":
        """Same scenes, but exact sensor and exact labels."""
        return self.replace(
            sensor={n: SensorModel() for n in _MATERIAL_NAMES}, invalid_pixel_prob=0.0,
            sigma_success=0.0, sigma_fail=0.0,
            material_label_noise={n: 0.0 for n in _MATERIAL_NAMES}, outlier_prob=0.0)


_MATERIAL_NAMES = [m.name.lower() for m in Material]


@dataclass
class Scene:
    depth: np.ndarray        # (H, W) float32, mm
    material: np.ndarray     # (H, W) uint8, Material codes
    rgb: np.ndarray          # (H, W, 3) float32 in [0, 1]
    object_count: int
    placement_failed: bool = False

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.depth, self.material, self.rgb):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class PokeSample:
    """One self-supervised tuple ``(I, D, g, y, z)``.

    ``ground_truth`` (true depth) and ``material`` are evaluation-only and
    are ``None`` in training data.
    """

    rgb: np.ndarray          # (H, W, 3) float32
    depth: np.ndarray        # (H, W) float32, 0.0 marks an invalid pixel
    g: tuple[int, int]
    y: int
    z: float
    ground_truth: np.ndarray | None = None
    material: np.ndarray | None = None


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _quantize(depth: np.ndarray) -> np.ndarray:
    return (np.round(depth / DEPTH_QUANTUM) * DEPTH_QUANTUM).astype(np.float32)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _place_box(rng, cfg, heights):
    sh, sw = (int(v) for v in rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1, 2))
    sh, sw = min(sh, cfg.height), min(sw, cfg.width)
    r = int(rng.integers(0, cfg.height - sh + 1))
    c = int(rng.integers(0, cfg.width - sw + 1))
    mask = np.zeros_like(heights, dtype=bool)
    mask[r:r + sh, c:c + sw] = True
    tall = rng.uniform(*cfg.box_height_range)
    base = heights[mask].max()
    top = np.zeros_like(heights)
    top[mask] = base + tall
    return mask, top


def _place_cylinder(rng, cfg, heights):
    radius = rng.uniform(*cfg.cylinder_radius_range)
    length = rng.integers(cfg.cylinder_length_range[0], cfg.cylinder_length_range[1] + 1) * cfg.pixel_size
    angle = rng.uniform(0, np.pi)
    cy = rng.uniform(0, cfg.height) * cfg.pixel_size
    cx = rng.uniform(0, cfg.width) * cfg.pixel_size
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width]
    py, px = (yy + 0.5) * cfg.pixel_size - cy, (xx + 0.5) * cfg.pixel_size - cx
    along = px * np.cos(angle) + py * np.sin(angle)
    across = -px * np.sin(angle) + py * np.cos(angle)
    mask = (np.abs(along) <= length / 2) & (np.abs(across) < radius)
    if not mask.any():
        return mask, None
    # a lying cylinder whose footprint must stay inside the bin
    ends = np.array([[np.cos(angle), np.sin(angle)]]) * length / 2
    for sgn in (1, -1):
        ex, ey = cx + sgn * ends[0, 0], cy + sgn * ends[0, 1]
        if not (radius <= ex <= cfg.width * cfg.pixel_size - radius
                and radius <= ey <= cfg.height * cfg.pixel_size - radius):
            return np.zeros_like(mask), None
    base = heights[mask].max()
    top = np.zeros_like(heights)
    top[mask] = base + radius + np.sqrt(np.maximum(radius ** 2 - across[mask] ** 2, 0.0))
    return mask, top


def _normals_z(depth: np.ndarray, pixel_size: float) -> np.ndarray:
    gy, gx = np.gradient(depth.astype(np.float64), pixel_size)
    return 1.0 / np.sqrt(1.0 + gx ** 2 + gy ** 2)


def _render_rgb(rng, cfg, depth, material, albedo, object_id):
    h, w = depth.shape
    nz = _normals_z(depth, cfg.pixel_size)
    # light co-located with the camera: inverse-square falloff plus Lambert term
    radiance = albedo * (nz * (cfg.floor_depth / depth) ** 2)[..., None] * 0.9
    shiny = material == Material.SHINY
    radiance[shiny] += (0.6 * nz[shiny] ** 8)[:, None]

    # reflective surfaces show high-frequency reflections of the surrounding clutter
    yy, xx = np.mgrid[0:h, 0:w]
    for oid in np.unique(object_id[object_id > 0]):
        sel = object_id == oid
        kind = material[sel][0]
        if kind not in (Material.MIRROR, Material.TRANSPARENT):
            continue
        fy, fx, phase = rng.uniform(0.8, 1.6), rng.uniform(0.8, 1.6), rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(fy * yy[sel] + fx * xx[sel] + phase) * np.cos(fx * yy[sel] - fy * xx[sel])
        speckle = rng.uniform(0, 1, (sel.sum(), 3))
        if kind == Material.MIRROR:
            radiance[sel] = 0.3 + 1.2 * (0.6 * stripes[:, None] + 0.4 * speckle)
        else:
            radiance[sel] = 0.6 * radiance[sel] + 0.4 * (stripes[:, None] * np.array([0.7, 0.9, 1.0]))
    return (1.0 - np.exp(-radiance)).astype(np.float32)


def generate_scene(config: SimulatorConfig, seed: int) -> Scene:
    """Drop objects into an empty bin and render the RGB view."""
    config.validate()
    cfg = config
    rng = _rng(seed, 1)
    h, w = cfg.height, cfg.width
    heights = np.zeros((h, w))
    material = np.full((h, w), Material.MATTE, dtype=np.uint8)
    object_id = np.zeros((h, w), dtype=np.int32)
    floor_tex = 0.55 + 0.05 * rng.standard_normal((h, w))
    albedo = np.stack([floor_tex * 0.9, floor_tex * 0.85, floor_tex * 0.8], axis=-1)

    names = _MATERIAL_NAMES
    probs = np.array([cfg.material_probs.get(n, 0.0) for n in names], dtype=float)
    probs /= probs.sum()
    max_height = cfg.floor_depth - cfg.camera_min

    wanted = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed, failed = 0, False
    for _ in range(wanted):
        for _attempt in range(cfg.placement_retries):
            place = _place_cylinder if rng.uniform() < cfg.cylinder_prob else _place_box
            mask, top = place(rng, cfg, heights)
            if top is not None and mask.any() and top[mask].max() <= max_height:
                break
        else:
            failed = True
            continue
        placed += 1
        heights[mask] = top[mask]
        object_id[mask] = placed
        kind = Material(int(rng.choice(len(names), p=probs)))
        material[mask] = kind
        albedo[mask] = rng.uniform(0.15, 0.55, 3) * np.asarray(cfg.material_tint.get(kind.name.lower(), 1.0))

    depth = _quantize(cfg.floor_depth - heights)
    rgb = _render_rgb(rng, cfg, depth, material, albedo, object_id)
    return Scene(depth=depth, material=material, rgb=rgb, object_count=placed, placement_failed=failed)


# ---------------------------------------------------------------------------
# Sensor and pokes
# ---------------------------------------------------------------------------

def render_sensor(scene: Scene, config: SimulatorConfig, seed: int) -> np.ndarray:
    """Noisy structured-light depth image for ``scene``; invalid pixels are 0.0."""
    rng = _rng(seed, 2)
    z = scene.depth.astype(np.float64)
    shape = z.shape
    std = np.zeros(shape)
    bias = np.zeros(shape)
    p_gross = np.zeros(shape)
    lo = np.zeros(shape)
    hi = np.zeros(shape)
    for m in Material:
        sel = scene.material == m
        model = config.sensor[m.name.lower()]
        std[sel] = model.noise_std
        bias[sel] = model.bias
        p_gross[sel] = model.gross_error_prob
        lo[sel], hi[sel] = model.gross_error_range

    # draw every stream for every pixel so the noise layout does not depend on material
    gauss = rng.standard_normal(shape)
    u_gross = rng.uniform(size=shape)
    magnitude = lo + (hi - lo) * rng.uniform(size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    u_invalid = rng.uniform(size=shape)

    d = z + bias + std * gauss
    gross = u_gross < p_gross
    # a negative error that would put the surface behind the camera flips direction
    sign = np.where((sign < 0) & (z - magnitude <= 0), 1.0, sign)
    d = np.where(gross, z + sign * magnitude, d)
    d = np.where(u_invalid < config.invalid_pixel_prob, 0.0, d)
    return d.astype(np.float32)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _footprint_roughness(depth: np.ndarray, g, radius_px: float) -> float:
    r, c = g
    k = int(np.ceil(radius_px))
    r0, r1 = max(0, r - k), min(depth.shape[0], r + k + 1)
    c0, c1 = max(0, c - k), min(depth.shape[1], c + k + 1)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    disk = (yy - r) ** 2 + (xx - c) ** 2 <= radius_px ** 2
    patch = depth[r0:r1, c0:c1][disk].astype(np.float64)
    return float(patch.max() - patch.min())


def success_probability(scene: Scene, config: SimulatorConfig, g) -> float:
    """Logistic grasp-success model: grip of the material minus surface roughness."""
    kind = Material(int(scene.material[g]))
    rough = _footprint_roughness(scene.depth, g, config.tooltip_radius / config.pixel_size)
    base = np.log(config.base_success_rate / (1 - config.base_success_rate))
    return float(_sigmoid(base + config.grip_logit[kind.name.lower()] - config.roughness_penalty * rough))


def sample_poke(scene: Scene, config: SimulatorConfig, seed: int,
                include_ground_truth: bool = False) -> PokeSample:
    """Simulate one grasp attempt and return its training tuple."""
    rng = _rng(seed, 3)
    objects = np.flatnonzero(scene.depth.reshape(-1) < config.floor_depth)
    if objects.size and rng.uniform() < config.object_bias:
        flat = int(rng.choice(objects))
    else:
        flat = int(rng.integers(0, scene.depth.size))
    g = (flat // scene.depth.shape[1], flat % scene.depth.shape[1])

    y = int(rng.uniform() < success_probability(scene, config, g))
    kind = Material(int(scene.material[g])).name.lower()
    sigma = config.sigma_success if y else config.sigma_fail
    noise = sigma * rng.standard_normal() + config.material_label_noise.get(kind, 0.0) * rng.standard_normal()
    z = float(scene.depth[g]) + config.compliance_offset + noise
    if rng.uniform() < config.outlier_prob:
        # faulty force sensor: the arm retracts early and records a shallower depth
        z -= rng.uniform(*config.outlier_range)

    sensor_seed = int(rng.integers(0, 2 ** 63))
    return PokeSample(
        rgb=scene.rgb,
        depth=render_sensor(scene, config, sensor_seed),
        g=g, y=y, z=float(np.float32(z)),
        ground_truth=scene.depth if include_ground_truth else None,
        material=scene.material if include_ground_truth else None,
    )


def generate_dataset(config: SimulatorConfig, n_scenes: int, pokes_per_scene: int, seed: int,
                     include_ground_truth: bool = False) -> list[PokeSample]:
    """``n_scenes * pokes_per_scene`` samples in scene-major order."""
    if n_scenes < 1 or pokes_per_scene < 1:
        raise ValueError("n_scenes and pokes_per_scene must be >= 1")
    config.validate()
    samples = []
    for scene_seq in np.random.SeedSequence([int(seed), 0xD8]).spawn(n_scenes):
        scene_seed, *poke_seeds = scene_seq.generate_state(1 + pokes_per_scene, dtype=np.uint64)
        scene = generate_scene(config, int(scene_seed))
        for ps in poke_seeds:
            samples.append(sample_poke(scene, config, int(ps), include_ground_truth))
    return samples


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def consumer_preset() -> SimulatorConfig:
    """Household goods: mostly matte with some shiny packaging, mild sensor noise."""
    return SimulatorConfig(
        material_probs={"matte": 0.65, "shiny": 0.35, "transparent": 0.0, "mirror": 0.0},
        sensor={
            "matte": SensorModel(noise_std=4.0),
            "shiny": SensorModel(noise_std=10.0, gross_error_prob=0.05,
                                 gross_error_range=(30.0, 200.0), bias=12.0),
            "transparent": SensorModel(noise_std=20.0, gross_error_prob=0.5,
                                       gross_error_range=(50.0, 500.0)),
            "mirror": SensorModel(noise_std=20.0, gross_error_prob=0.8,
                                  gross_error_range=(200.0, 3000.0)),
        },
        invalid_pixel_prob=0.01,
        sigma_success=3.0,
        sigma_fail=8.0,
    )


def adversarial_preset() -> SimulatorConfig:
    """Glassware, mirrors and shiny items: frequent gross sensor errors."""
    cfg = consumer_preset()
    cfg.material_probs = {"matte": 0.2, "shiny": 0.2, "transparent": 0.3, "mirror": 0.3}
    cfg.sensor["transparent"] = SensorModel(noise_std=20.0, gross_error_prob=0.6,
                                            gross_error_range=(100.0, 1500.0))
    cfg.sensor["mirror"] = SensorModel(noise_std=20.0, gross_error_prob=0.8,
                                       gross_error_range=(300.0, 5000.0))
    cfg.invalid_pixel_prob = 0.02
    cfg.outlier_prob = 0.005
    return cfg


def heteroscedastic_preset() -> SimulatorConfig:
    """Exact sensor, label noise that depends only on the material.

    Objects are tinted by material, so the material (and with it the noise
    level) is visible in the RGB image.

    The conditional label variance given the images is known in closed form,
    which makes this the reference set for calibration checks.
    """
    return SimulatorConfig(
        material_probs={"matte": 0.5, "shiny": 0.5, "transparent": 0.0, "mirror": 0.0},
        sensor={n: SensorModel() for n in _MATERIAL_NAMES},
        sigma_success=0.0, sigma_fail=0.0,
        material_label_noise={"matte": 8.0, "shiny": 25.0, "transparent": 0.0, "mirror": 0.0},
        # warm matte and cool shiny objects, so the noise level can be read off the image
        material_tint={"matte": (1.0, 0.55, 0.45), "shiny": (0.45, 0.6, 1.0),
                       "transparent": (1.0, 1.0, 1.0), "mirror": (1.0, 1.0, 1.0)},
    )


PRESETS = {
    "consumer": consumer_preset,
    "adversarial": adversarial_preset,
    "heteroscedastic": heteroscedastic_preset,
}


def preset(name: str) -> SimulatorConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
