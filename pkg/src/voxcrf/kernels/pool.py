"""Window-2 max pooling over (C, X, Y, Z) arrays.

stride 2 halves every spatial dim.  stride 1 keeps the shape; the window at
the upper edge is completed by replicating the last slice.  Within a window
the first maximum in (i, j, k) order wins, which is also the lowest linear
input index.
"""
import numpy as np

from .._accel import USE_NUMBA, njit


@njit
def _maxpool_fwd_nb(x, stride):
    c_n, nx, ny, nz = x.shape
    if stride == 2:
        ox, oy, oz = nx // 2, ny // 2, nz // 2
    else:
        ox, oy, oz = nx, ny, nz
    out = np.empty((c_n, ox, oy, oz))
    arg = np.empty((c_n, ox, oy, oz), dtype=np.int64)
    for c in range(c_n):
        for a in range(ox):
            for b in range(oy):
                for d in range(oz):
                    best = -np.inf
                    besti = -1
                    for i in range(2):
                        xi = min(a * stride + i, nx - 1)
                        for j in range(2):
                            yj = min(b * stride + j, ny - 1)
                            for l in range(2):
                                zl = min(d * stride + l, nz - 1)
                                v = x[c, xi, yj, zl]
                                if v > best:
                                    best = v
                                    besti = ((c * nx + xi) * ny + yj) * nz + zl
                    out[c, a, b, d] = best
                    arg[c, a, b, d] = besti
    return out, arg


@njit
def _maxpool_bwd_nb(g, arg, size):
    gx = np.zeros(size)
    gf = g.ravel()
    af = arg.ravel()
    for t in range(gf.shape[0]):
        gx[af[t]] += gf[t]
    return gx


def _maxpool_fwd_np(x, stride):
    c_n, nx, ny, nz = x.shape
    idx = np.arange(x.size, dtype=np.int64).reshape(x.shape)
    if stride == 2:
        def take(a, i, j, l):
            return a[:, i::2, j::2, l::2][:, :nx // 2, :ny // 2, :nz // 2]
    else:
        xe = np.minimum(np.arange(nx) + 1, nx - 1)
        ye = np.minimum(np.arange(ny) + 1, ny - 1)
        ze = np.minimum(np.arange(nz) + 1, nz - 1)

        def take(a, i, j, l):
            sx = xe if i else slice(None)
            sy = ye if j else slice(None)
            sz = ze if l else slice(None)
            return a[:, sx][:, :, sy][:, :, :, sz]
    vals = []
    ids = []
    for i in range(2):
        for j in range(2):
            for l in range(2):
                vals.append(take(x, i, j, l))
                ids.append(take(idx, i, j, l))
    vals = np.stack(vals)
    ids = np.stack(ids)
    k = np.argmax(vals, axis=0)
    out = np.take_along_axis(vals, k[None], axis=0)[0]
    arg = np.take_along_axis(ids, k[None], axis=0)[0]
    return out, arg


def _maxpool_bwd_np(g, arg, size):
    return np.bincount(arg.ravel(), weights=g.ravel(), minlength=size).astype(np.float64)


def maxpool3d_forward(x, stride, use_numba=None):
    """Return (output, argmax flat indices into ``x``)."""
    use_numba = USE_NUMBA if use_numba is None else use_numba
    x = np.ascontiguousarray(x, dtype=np.float64)
    fn = _maxpool_fwd_nb if use_numba else _maxpool_fwd_np
    return fn(x, stride)


def maxpool3d_backward(g, arg, in_shape, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba
    size = int(np.prod(in_shape))
    fn = _maxpool_bwd_nb if use_numba else _maxpool_bwd_np
    return fn(np.ascontiguousarray(g), np.ascontiguousarray(arg), size).reshape(in_shape)
