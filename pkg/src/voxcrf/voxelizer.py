"""Metric voxel grids with occupancy / RGB / intensity channels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_VOXEL_SIZE = 0.05
DEFAULT_MAX_DIMS = 100


@dataclass(frozen=True)
class IntensityStats:
    mean: float
    range: float

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("intensity range must be positive")

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(float(values.mean()), float(values.max() - values.min()) or 1.0)


@dataclass
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    channels: np.ndarray  # (C, nx, ny, nz)
    channel_names: tuple

    @property
    def occupancy(self):
        return self.channels[0]

    def extent_max(self):
        return self.origin + np.asarray(self.dims) * self.voxel_size


def _axis_dims(extent, top_offset, v):
    n = math.ceil(extent / v - 1e-9)
    n = max(n, int(math.floor(top_offset / v)) + 1, 1)
    return n


def voxel_indices(positions, origin, voxel_size):
    return np.floor((positions - origin) / voxel_size).astype(np.int64)


def build_grid(crop, voxel_size=DEFAULT_VOXEL_SIZE, stats=None, pad_to=1,
               max_dims=DEFAULT_MAX_DIMS):
    """Voxelize a crop.

    The grid starts at the crop's bounds minimum.  Occupied voxels carry the
    mean color (scaled to [0, 1]) and normalized mean intensity of their
    points; empty voxels are all zero.  Dims are padded up to a multiple of
    ``pad_to`` so downsampling layers divide evenly.
    """
    if len(crop) == 0:
        raise ValueError("cannot voxelize an empty crop")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if crop.intensity is not None and stats is None:
        raise ValueError("intensity present but no IntensityStats given")
    origin = crop.bounds[0].copy()
    extent = crop.bounds[1] - origin
    top = crop.positions.max(axis=0) - origin
    dims = []
    for ax in range(3):
        n = _axis_dims(extent[ax], top[ax], voxel_size)
        n = -(-n // pad_to) * pad_to
        if max_dims is not None and n > max_dims:
            raise ValueError(f"grid axis {ax} needs {n} voxels, cap is {max_dims}")
        dims.append(n)
    dims = tuple(dims)

    idx = voxel_indices(crop.positions, origin, voxel_size)
    flat = np.ravel_multi_index(idx.T, dims)
    size = dims[0] * dims[1] * dims[2]
    count = np.bincount(flat, minlength=size).astype(np.float64)
    occupied = count > 0
    safe = np.where(occupied, count, 1.0)

    chans = [occupied.astype(np.float64)]
    names = ["occupancy"]
    if crop.colors is not None:
        for k, name in enumerate("RGB"):
            s = np.bincount(flat, weights=crop.colors[:, k], minlength=size)
            chans.append(s / safe / 255.0)
            names.append(name)
    if crop.intensity is not None:
        s = np.bincount(flat, weights=crop.intensity, minlength=size)
        mean = s / safe
        chans.append(np.where(occupied, (mean - stats.mean) / stats.range, 0.0))
        names.append("intensity")
    channels = np.stack(chans).reshape((len(chans),) + dims)
    return VoxelGrid(origin, float(voxel_size), dims, channels, tuple(names))


def locate_point(grid, p):
    """Voxel index containing ``p``; cells are half-open [kV, (k+1)V)."""
    idx = voxel_indices(np.asarray(p, dtype=np.float64).reshape(1, 3), grid.origin, grid.voxel_size)[0]
    if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
        raise ValueError(f"point {p} lies outside the grid")
    return tuple(int(i) for i in idx)
