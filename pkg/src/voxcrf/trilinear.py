"""Coarse voxel scores -> point scores, and the matching gradient splat.

Each point reads the 8 coarse voxel centers of the 2x2x2 cell bracketing it.
The weight of a center c is prod_s (1 - |p_s - c_s| / V) with V the coarse
voxel size.  Centers outside the grid are dropped and the remaining weights
renormalized, so weights always sum to one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels.interp import gather, scatter


@dataclass
class InterpWeights:
    index: np.ndarray    # (N, 8) flat coarse voxel index (C order over dims)
    weight: np.ndarray   # (N, 8)
    dims: tuple

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))


def compute_weights(points, origin, voxel_size, dims):
    """Interpolation weights for ``points`` on a grid of ``dims`` cells."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64)
    dims_a = np.asarray(dims, dtype=np.int64)
    u = (p - origin) / voxel_size
    if np.any(u < -1e-9) or np.any(u > dims_a + 1e-9):
        raise ValueError("point outside the grid")
    u = u - 0.5
    base = np.floor(u).astype(np.int64)
    t = u - base
    n = len(p)
    index = np.zeros((n, 8), dtype=np.int64)
    weight = np.zeros((n, 8))
    corner = 0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                off = np.array([a, b, c])
                cell = base + off
                w = np.prod(np.where(off == 1, t, 1.0 - t), axis=1)
                inside = np.all((cell >= 0) & (cell < dims_a), axis=1)
                cell = np.clip(cell, 0, dims_a - 1)
                index[:, corner] = np.ravel_multi_index(cell.T, tuple(dims_a))
                weight[:, corner] = np.where(inside, w, 0.0)
                corner += 1
    total = weight.sum(axis=1, keepdims=True)
    weight /= total
    return InterpWeights(index, weight, tuple(int(d) for d in dims_a))


def weights_for_scores(points, scores):
    return compute_weights(points, scores.origin, scores.voxel_size, scores.dims)


def interpolate(weights, voxel_scores):
    """Point logits (N, L) from voxel scores (L, nx, ny, nz)."""
    vs = np.asarray(voxel_scores, dtype=np.float64)
    table = vs.reshape(vs.shape[0], -1).T
    if table.shape[0] != weights.n_voxels:
        raise ValueError("weights were built for a different grid")
    return gather(weights.index, weights.weight, table)


def splat(weights, point_grads):
    """Adjoint of :func:`interpolate`: (N, L) point grads -> (L, nx, ny, nz)."""
    g = np.asarray(point_grads, dtype=np.float64)
    out = scatter(weights.index, weights.weight, g, weights.n_voxels)
    return out.T.reshape((g.shape[1],) + weights.dims)
