"""Gather / scatter with 8 weighted neighbours per point."""
import numpy as np

from .._accel import USE_NUMBA, njit


@njit
def _gather_nb(idx, w, table):
    n, k = idx.shape
    c = table.shape[1]
    out = np.zeros((n, c))
    for i in range(n):
        for t in range(k):
            wt = w[i, t]
            if wt == 0.0:
                continue
            row = table[idx[i, t]]
            for l in range(c):
                out[i, l] += wt * row[l]
    return out


@njit
def _scatter_nb(idx, w, vals, m):
    n, k = idx.shape
    c = vals.shape[1]
    out = np.zeros((m, c))
    for i in range(n):
        for t in range(k):
            wt = w[i, t]
            if wt == 0.0:
                continue
            v = idx[i, t]
            for l in range(c):
                out[v, l] += wt * vals[i, l]
    return out


def _gather_np(idx, w, table):
    return np.einsum("nk,nkc->nc", w, table[idx])


def _scatter_np(idx, w, vals, m):
    contrib = w[:, :, None] * vals[:, None, :]
    flat = idx.ravel()
    out = np.empty((m, vals.shape[1]))
    for l in range(vals.shape[1]):
        out[:, l] = np.bincount(flat, weights=contrib[:, :, l].ravel(), minlength=m)
    return out


def gather(idx, w, table, use_numba=None):
    """out[i] = sum_k w[i, k] * table[idx[i, k]]."""
    use_numba = USE_NUMBA if use_numba is None else use_numba
    fn = _gather_nb if use_numba else _gather_np
    return fn(np.ascontiguousarray(idx), np.ascontiguousarray(w), np.ascontiguousarray(table))


def scatter(idx, w, vals, m, use_numba=None):
    """Adjoint of :func:`gather`: out[v] = sum_{i,k: idx[i,k]=v} w[i,k] * vals[i]."""
    use_numba = USE_NUMBA if use_numba is None else use_numba
    fn = _scatter_nb if use_numba else _scatter_np
    return fn(np.ascontiguousarray(idx), np.ascontiguousarray(w), np.ascontiguousarray(vals), int(m))
