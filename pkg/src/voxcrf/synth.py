"""Synthetic labeled rooms: floor, walls, ceiling, boxes and pillars.

Points are sampled on each surface as a homogeneous Poisson process of the
requested density, with class-correlated colors and optional label noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud

CLASSES = ("floor", "wall", "ceiling", "box", "pillar")
FLOOR, WALL, CEILING, BOX, PILLAR = range(5)

# Painted surfaces (wall, ceiling, pillar) share close off-white tones, as in
# real rooms, so color alone does not separate them.
BASE_COLORS = np.array([
    [120, 90, 60],    # floor
    [205, 198, 180],  # wall
    [222, 220, 212],  # ceiling
    [170, 60, 50],    # box
    [190, 186, 172],  # pillar
], dtype=np.float64)


@dataclass(frozen=True)
class SynthSceneSpec:
    extent: tuple = (4.0, 4.0, 2.5)       # meters
    density: float = 600.0                # points per square meter
    color_sigma: float = 12.0
    label_noise: float = 0.0
    boxes: int = 3
    pillars: int = 1
    position_sigma: float = 0.003
    seed: int = 0
    base_colors: tuple = field(default=tuple(map(tuple, BASE_COLORS)))

    def __post_init__(self):
        if len(self.extent) != 3 or min(self.extent) <= 0.5:
            raise ValueError("room extents must be three values above 0.5 m")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.color_sigma < 0 or self.position_sigma < 0:
            raise ValueError("noise levels must be >= 0")
        if self.boxes < 0 or self.pillars < 0:
            raise ValueError("object counts must be >= 0")


def _rect(rng, density, origin, u, v):
    """Poisson sample the parallelogram origin + s*u + t*v, s,t in [0,1]."""
    area = float(np.linalg.norm(np.cross(u, v)))
    n = rng.poisson(density * area)
    st = rng.random((n, 2))
    return origin + st[:, :1] * u + st[:, 1:] * v


def _box_faces(lo, hi, bottom=False):
    """Axis-aligned box faces as (origin, u, v) triples."""
    dx, dy, dz = hi - lo
    ex, ey, ez = np.diag([dx, dy, dz])
    faces = [
        (lo + ez, ex, ey),                     # top
        (lo, ex, ez), (lo + ey, ex, ez),       # y faces
        (lo, ey, ez), (lo + ex, ey, ez),       # x faces
    ]
    if bottom:
        faces.append((lo, ex, ey))
    return faces


def _inside_xy(p, boxes):
    hit = np.zeros(len(p), dtype=bool)
    for lo, hi in boxes:
        hit |= np.all((p[:, :2] > lo[:2]) & (p[:, :2] < hi[:2]), axis=1)
    return hit


def generate(spec):
    """Sample one room; returns a labeled :class:`PointCloud` (colors 0..255)."""
    rng = np.random.default_rng(spec.seed)
    W, D, H = map(float, spec.extent)
    O = np.zeros(3)
    ex, ey, ez = np.diag([W, D, H])
    parts = []

    objects = []
    for _ in range(spec.boxes):
        size = rng.uniform([0.4, 0.4, 0.3], [1.0, 1.0, 1.0])
        size = np.minimum(size, [W / 3, D / 3, H / 2])
        lo = np.array([rng.uniform(0.2, W - size[0] - 0.2), rng.uniform(0.2, D - size[1] - 0.2), 0.0])
        objects.append((BOX, lo, lo + size))
    for _ in range(spec.pillars):
        side = rng.uniform(0.25, 0.45)
        lo = np.array([rng.uniform(0.4, W - side - 0.4), rng.uniform(0.4, D - side - 0.4), 0.0])
        objects.append((PILLAR, lo, lo + np.array([side, side, H])))
    footprints = [(lo, hi) for _, lo, hi in objects]

    floor = _rect(rng, spec.density, O, ex, ey)
    parts.append((FLOOR, floor[~_inside_xy(floor, footprints)]))
    ceiling = _rect(rng, spec.density, O + ez, ex, ey)
    pillar_prints = [(lo, hi) for c, lo, hi in objects if c == PILLAR]
    parts.append((CEILING, ceiling[~_inside_xy(ceiling, pillar_prints)]))
    for origin, u in ((O, ex), (O + ey, ex), (O, ey), (O + ex, ey)):
        parts.append((WALL, _rect(rng, spec.density, origin, u, ez)))
    for k, (cls, lo, hi) in enumerate(objects):
        faces = _box_faces(lo, hi)
        if cls == PILLAR:
            faces = faces[1:]
        for origin, u, v in faces:
            pts = _rect(rng, spec.density, origin, u, v)
            # drop the parts of a face buried inside another object
            buried = np.zeros(len(pts), dtype=bool)
            for a, b in footprints[:k] + footprints[k + 1:]:
                buried |= np.all((pts > a + 1e-6) & (pts < b - 1e-6), axis=1)
            parts.append((cls, pts[~buried]))

    positions = np.concatenate([p for _, p in parts])
    labels = np.concatenate([np.full(len(p), c, dtype=np.int64) for c, p in parts])
    if spec.position_sigma > 0:
        positions = positions + rng.normal(0.0, spec.position_sigma, positions.shape)
    base = np.asarray(spec.base_colors, dtype=np.float64)
    colors = base[labels] + rng.normal(0.0, spec.color_sigma, (len(labels), 3))
    colors = np.clip(np.rint(colors), 0, 255)
    if spec.label_noise > 0:
        flip = rng.random(len(labels)) < spec.label_noise
        shift = rng.integers(1, len(CLASSES), flip.sum())
        labels = labels.copy()
        labels[flip] = (labels[flip] + shift) % len(CLASSES)
    return PointCloud(positions, colors, None, labels, len(CLASSES))


def random_room(seed, density=600.0, label_noise=0.0):
    """A room with seeded extents in [3.5, 4.5] x [3.5, 4.5] x [2.4, 2.8] m."""
    rng = np.random.default_rng([seed, 7])
    extent = tuple(float(x) for x in rng.uniform([3.5, 3.5, 2.4], [4.5, 4.5, 2.8]))
    return SynthSceneSpec(extent=extent, density=density, label_noise=label_noise,
                          boxes=int(rng.integers(2, 5)), pillars=int(rng.integers(1, 3)),
                          seed=seed)
