"""Procedural paired (image, depth) scenes.

Each scene is a stack of textured rectangles and discs at random depths over
a background at depth 1.0. Image brightness is shaded by depth so that the
image carries a learnable depth signal.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, GeometryError, IntegrityError

BACKGROUND_ALBEDO = 0.3
STRIPE_DARK = 0.5
SCENE_MAGIC = b"SGMIMSCN"
CALIBRATION_SEEDS = range(0, 1024)


@dataclass(frozen=True)
class SceneConfig:
    H: int = 64
    W: int = 64
    shape_count_range: tuple[int, int] = (3, 8)
    depth_range: tuple[float, float] = (0.1, 0.9)
    noise_std: float = 0.02
    texture_period_range: tuple[int, int] = (4, 12)

    def __post_init__(self):
        lo, hi = self.shape_count_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"bad shape_count_range {self.shape_count_range}")
        zlo, zhi = self.depth_range
        if not 0.0 < zlo <= zhi < 1.0:
            raise ConfigurationError(f"depth_range {self.depth_range} must lie inside (0, 1)")
        plo, phi = self.texture_period_range
        if plo < 2 or phi < plo:
            raise ConfigurationError(f"bad texture_period_range {self.texture_period_range}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")


@lru_cache(maxsize=8)
def _pixel_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:H, 0:W]
    yy.flags.writeable = False
    xx.flags.writeable = False
    return yy, xx


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "circle"
    # rect: (top, left, bottom, right) pixel bounds, exclusive end
    # circle: (cy, cx, radius)
    geometry: tuple[float, ...]
    depth: float
    albedo: tuple[float, float, float]
    period: int = 8
    angle: float = 0.0

    def coverage(self, H: int, W: int) -> np.ndarray:
        yy, xx = _pixel_grid(H, W)
        if self.kind == "rect":
            t, l, b, r = self.geometry
            return (yy >= t) & (yy < b) & (xx >= l) & (xx < r)
        if self.kind == "circle":
            cy, cx, rad = self.geometry
            return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= rad**2
        raise ConfigurationError(f"unknown shape kind {self.kind!r}")

    def texture(self, H: int, W: int) -> np.ndarray:
        yy, xx = _pixel_grid(H, W)
        phase = (xx * np.cos(self.angle) + yy * np.sin(self.angle)) / self.period
        return np.where(np.floor(2 * phase) % 2 == 0, 1.0, STRIPE_DARK)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W, 1) float32 in (0, 1]
    seed: int = -1
    shapes: list[Shape] = field(default_factory=list, repr=False)


def render_scene(shapes: Sequence[Shape], cfg: SceneConfig, rng: np.random.Generator, seed: int = -1) -> Scene:
    """Composite shapes far-to-near and add clamped Gaussian noise."""
    H, W = cfg.H, cfg.W
    albedo = np.full((H, W, 3), BACKGROUND_ALBEDO)
    texture = np.ones((H, W))
    depth = np.ones((H, W))
    # painter's algorithm: stable sort by depth, farthest first
    for s in sorted(shapes, key=lambda s: -s.depth):
        cov = s.coverage(H, W)
        albedo[cov] = s.albedo
        texture[cov] = s.texture(H, W)[cov]
        depth[cov] = s.depth
    shading = 1.25 - 0.25 * depth
    image = albedo * (texture * shading)[..., None]
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Scene(image.astype(np.float32), depth[..., None].astype(np.float32), seed, list(shapes))


def _draw_shape(rng: np.random.Generator, cfg: SceneConfig) -> Shape:
    H, W = cfg.H, cfg.W
    z = float(rng.uniform(*cfg.depth_range))
    albedo = tuple(float(a) for a in rng.uniform(0.35, 1.0, size=3))
    period = int(rng.integers(cfg.texture_period_range[0], cfg.texture_period_range[1] + 1))
    angle = float(rng.choice([0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4]))
    if rng.random() < 0.5:
        h = int(rng.integers(H // 8, H // 2 + 1))
        w = int(rng.integers(W // 8, W // 2 + 1))
        t = int(rng.integers(0, H - h + 1))
        l = int(rng.integers(0, W - w + 1))
        return Shape("rect", (t, l, t + h, l + w), z, albedo, period, angle)
    rad = float(rng.uniform(min(H, W) / 10, min(H, W) / 4))
    cy, cx = float(rng.uniform(0, H)), float(rng.uniform(0, W))
    return Shape("circle", (cy, cx, rad), z, albedo, period, angle)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng(seed)
    lo, hi = cfg.shape_count_range
    k = int(rng.integers(lo, hi + 1))
    shapes = [_draw_shape(rng, cfg) for _ in range(k)]
    return render_scene(shapes, cfg, rng, seed)


@dataclass(frozen=True)
class NormStats:
    image_mean: tuple[float, float, float]
    image_std: tuple[float, float, float]
    depth_mean: float
    depth_std: float

    def to_dict(self) -> dict:
        return {
            "image_mean": list(self.image_mean),
            "image_std": list(self.image_std),
            "depth_mean": self.depth_mean,
            "depth_std": self.depth_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["image_mean"]), tuple(d["image_std"]), d["depth_mean"], d["depth_std"])


def compute_stats(images: np.ndarray, depths: np.ndarray) -> NormStats:
    """Per-channel statistics over stacked (S, H, W, 3) images and (S, H, W, 1) depths."""
    img = images.reshape(-1, images.shape[-1]).astype(np.float64)
    mean, std = img.mean(axis=0), img.std(axis=0)
    if np.any(std == 0):
        raise ConfigurationError("zero standard deviation in calibration images")
    d = depths.astype(np.float64)
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()), float(d.mean()), float(d.std()))


@lru_cache(maxsize=4)
def calibration_stats(cfg: SceneConfig = SceneConfig()) -> NormStats:
    images, depths = stack_scenes(CALIBRATION_SEEDS, cfg)
    return compute_stats(images, depths)


def normalize(scene: Scene, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """Standardize the image per channel; depth is already in (0, 1] and passes through."""
    std = np.asarray(stats.image_std)
    if np.any(std == 0):
        raise ConfigurationError("zero standard deviation in normalization stats")
    image = (scene.image - np.asarray(stats.image_mean)) / std
    return image.astype(np.float32), scene.depth.astype(np.float32)


def stack_scenes(seeds, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    scenes = [generate_scene(int(s), cfg) for s in seeds]
    return np.stack([s.image for s in scenes]), np.stack([s.depth for s in scenes])


def batch_iter(start_seed: int, cfg: SceneConfig, batch_size: int, stats: NormStats | None = None,
               stop_seed: int | None = None) -> Iterator[tuple[list[int], np.ndarray, np.ndarray]]:
    """Yield (seeds, images, depths) batches over consecutive seeds from ``start_seed``.

    Images are normalized when ``stats`` is given. Iteration ends before
    ``stop_seed`` if set (a final short batch is dropped).
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    seed = start_seed
    while stop_seed is None or seed + batch_size <= stop_seed:
        seeds = list(range(seed, seed + batch_size))
        yield (seeds, *load_batch(seeds, cfg, stats))
        seed += batch_size


def load_batch(seeds: Sequence[int], cfg: SceneConfig, stats: NormStats | None = None):
    images, depths = [], []
    for s in seeds:
        scene = generate_scene(int(s), cfg)
        if stats is not None:
            img, dep = normalize(scene, stats)
        else:
            img, dep = scene.image, scene.depth
        images.append(img)
        depths.append(dep)
    return np.stack(images), np.stack(depths)


def write_scene(path: str | Path, scene: Scene) -> None:
    H, W, _ = scene.image.shape
    if scene.depth.shape[:2] != (H, W):
        raise GeometryError("image and depth are not aligned")
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<II", H, W))
        f.write(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(scene.depth, dtype="<f4").tobytes())


def read_scene(path: str | Path) -> Scene:
    raw = Path(path).read_bytes()
    if raw[:8] != SCENE_MAGIC:
        raise IntegrityError(f"{path}: bad magic")
    H, W = struct.unpack_from("<II", raw, 8)
    n_img, n_dep = H * W * 3 * 4, H * W * 4
    if len(raw) != 16 + n_img + n_dep:
        raise IntegrityError(f"{path}: expected {16 + n_img + n_dep} bytes, found {len(raw)}")
    image = np.frombuffer(raw, "<f4", H * W * 3, 16).reshape(H, W, 3).astype(np.float32)
    depth = np.frombuffer(raw, "<f4", H * W, 16 + n_img).reshape(H, W, 1).astype(np.float32)
    return Scene(image, depth)
