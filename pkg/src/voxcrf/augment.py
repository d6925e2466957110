"""Training-time augmentation: color jitter, Z rotation + scaling, sub-sampling.

Every random operation takes an explicit ``numpy.random.Generator`` so a run
is a deterministic function of its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# (threshold point count, factor) rows for the two dense datasets.
S3DIS_SUBSAMPLE = ((100_000, 10), (1_000_000, 10), (10_000_000, 10))
SEMANTIC3D_SUBSAMPLE = ((100_000, 10), (1_000_000, 50), (10_000_000, 100))


@dataclass(frozen=True)
class AugmentConfig:
    color_range: float = 2.5
    angle_range: tuple = (0.0, 2.0 * math.pi)
    scale_range: tuple = (0.9, 1.1)
    subsample_table: tuple = field(default=())
    seed: int = 0

    def __post_init__(self):
        if self.color_range < 0:
            raise ValueError("color_range must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < low <= high")
        for thr, factor in self.subsample_table:
            if factor < 1 or thr < 0:
                raise ValueError("subsample factors must be >= 1")


def color_jitter(cloud, config, rng):
    if cloud.colors is None:
        raise ValueError("cloud has no color channels")
    if config.color_range == 0:
        return cloud
    r = config.color_range
    noise = rng.uniform(-r, r, size=cloud.colors.shape)
    return replace(cloud, colors=np.clip(cloud.colors + noise, 0.0, 255.0))


def rotate_scale(cloud, angle, scale):
    """Rotate about the vertical axis through the XY center of the bounds, then scale.

    Scaling is about the same center point (Z included), so pairwise
    distances multiply by exactly ``scale``.  The output bounds keep the
    same XY center, so applying (-angle, 1/scale) afterwards undoes the move.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    lo, hi = cloud.bounds
    center = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, 0.0])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    moved = (cloud.positions - center) @ rot.T * scale + center
    out = cloud.with_positions(moved)
    if len(moved):
        half = np.abs(moved[:, :2] - center[:2]).max(axis=0)
        out.bounds[0, :2] = center[:2] - half
        out.bounds[1, :2] = center[:2] + half
    return out


def subsample_factor(n_points, table):
    factor = 1
    for thr, f in sorted(table):
        if n_points >= thr:
            factor = f
    return factor


def subsample(cloud, config, rng):
    """Keep each point with probability 1/factor; never returns an empty cloud."""
    factor = subsample_factor(len(cloud), config.subsample_table)
    if factor <= 1:
        return cloud
    keep = rng.random(len(cloud)) < 1.0 / factor
    if not keep.any():
        keep[rng.integers(len(cloud))] = True
    return cloud.subset(keep)


def random_augment(cloud, config, rng):
    """One training draw: rotation, scaling, color jitter and sub-sampling."""
    angle = rng.uniform(*config.angle_range)
    scale = rng.uniform(*config.scale_range)
    out = rotate_scale(cloud, angle, scale)
    if out.colors is not None:
        out = color_jitter(out, config, rng)
    return subsample(out, config, rng)
