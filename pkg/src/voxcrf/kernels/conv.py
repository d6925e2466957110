"""Dense 3D cross-correlation kernels (forward, input grad, weight grad)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .._accel import USE_NUMBA, njit


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))


# --- numba -----------------------------------------------------------------

@njit
def _conv3d_fwd_nb(xp, w, b, stride, ox, oy, oz):
    # Input-driven: each nonzero input voxel is scattered to the outputs it
    # touches, so sparse occupancy grids cost little.
    co_n, ci_n, k = w.shape[0], w.shape[1], w.shape[2]
    px, py, pz = xp.shape[1], xp.shape[2], xp.shape[3]
    out = np.empty((ox, oy, oz, co_n))
    for x in range(ox):
        for y in range(oy):
            for z in range(oz):
                for co in range(co_n):
                    out[x, y, z, co] = b[co]
    wt = np.empty((ci_n, k, k, k, co_n))
    for co in range(co_n):
        for ci in range(ci_n):
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        wt[ci, i, j, l, co] = w[co, ci, i, j, l]
    for ci in range(ci_n):
        for a in range(px):
            for c in range(py):
                for e in range(pz):
                    v = xp[ci, a, c, e]
                    if v == 0.0:
                        continue
                    for i in range(k):
                        xo = a - i
                        if xo < 0 or xo % stride != 0 or xo // stride >= ox:
                            continue
                        xo //= stride
                        for j in range(k):
                            yo = c - j
                            if yo < 0 or yo % stride != 0 or yo // stride >= oy:
                                continue
                            yo //= stride
                            for l in range(k):
                                zo = e - l
                                if zo < 0 or zo % stride != 0 or zo // stride >= oz:
                                    continue
                                zo //= stride
                                dst = out[xo, yo, zo]
                                src = wt[ci, i, j, l]
                                for co in range(co_n):
                                    dst[co] += v * src[co]
    return np.ascontiguousarray(out.transpose(3, 0, 1, 2))


@njit
def _conv3d_grad_input_nb(g, w, stride, pshape):
    co_n, ci_n, k = w.shape[0], w.shape[1], w.shape[2]
    ox, oy, oz = g.shape[1], g.shape[2], g.shape[3]
    gt = np.ascontiguousarray(g.transpose(1, 2, 3, 0))
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))  # (k, k, k, co, ci)
    gxp = np.zeros((pshape[1], pshape[2], pshape[3], ci_n))
    for x in range(ox):
        for y in range(oy):
            for z in range(oz):
                src = gt[x, y, z]
                nonzero = False
                for co in range(co_n):
                    if src[co] != 0.0:
                        nonzero = True
                        break
                if not nonzero:
                    continue
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            dst = gxp[x * stride + i, y * stride + j, z * stride + l]
                            for co in range(co_n):
                                gv = src[co]
                                if gv == 0.0:
                                    continue
                                wr = wt[i, j, l, co]
                                for ci in range(ci_n):
                                    dst[ci] += gv * wr[ci]
    return np.ascontiguousarray(gxp.transpose(3, 0, 1, 2))


@njit
def _conv3d_grad_weight_nb(g, xp, stride, k):
    co_n, ox, oy, oz = g.shape
    ci_n, px, py, pz = xp.shape
    gt = np.ascontiguousarray(g.transpose(1, 2, 3, 0))
    acc = np.zeros((ci_n, k, k, k, co_n))
    for ci in range(ci_n):
        for a in range(px):
            for c in range(py):
                for e in range(pz):
                    v = xp[ci, a, c, e]
                    if v == 0.0:
                        continue
                    for i in range(k):
                        xo = a - i
                        if xo < 0 or xo % stride != 0 or xo // stride >= ox:
                            continue
                        xo //= stride
                        for j in range(k):
                            yo = c - j
                            if yo < 0 or yo % stride != 0 or yo // stride >= oy:
                                continue
                            yo //= stride
                            for l in range(k):
                                zo = e - l
                                if zo < 0 or zo % stride != 0 or zo // stride >= oz:
                                    continue
                                zo //= stride
                                src = gt[xo, yo, zo]
                                dst = acc[ci, i, j, l]
                                for co in range(co_n):
                                    dst[co] += v * src[co]
    return np.ascontiguousarray(acc.transpose(4, 0, 1, 2, 3))


# --- numpy -----------------------------------------------------------------

def _windows(xp, k, stride):
    v = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return v[:, ::stride, ::stride, ::stride]


def _conv3d_fwd_np(xp, w, b, stride, ox, oy, oz):
    k = w.shape[2]
    win = _windows(xp, k, stride)[:, :ox, :oy, :oz]
    out = np.tensordot(w, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += b[:, None, None, None]
    return out


def _conv3d_grad_input_np(g, w, stride, pshape):
    k = w.shape[2]
    ox, oy, oz = g.shape[1:]
    gxp = np.zeros(pshape)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contrib = np.tensordot(w[:, :, i, j, l], g, axes=(0, 0))
                gxp[:, i:i + stride * ox:stride,
                    j:j + stride * oy:stride,
                    l:l + stride * oz:stride] += contrib
    return gxp


def _conv3d_grad_weight_np(g, xp, stride, k):
    ox, oy, oz = g.shape[1:]
    win = _windows(xp, k, stride)[:, :ox, :oy, :oz]
    return np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))


# --- dispatch --------------------------------------------------------------

def conv3d_forward(x, w, b, stride=1, pad=0, use_numba=None):
    """Return (output, padded input).  The padded input is kept for backward."""
    use_numba = USE_NUMBA if use_numba is None else use_numba
    k = w.shape[2]
    xp = _pad(x, pad)
    ox, oy, oz = (out_size(n, k, stride, pad) for n in x.shape[1:])
    fn = _conv3d_fwd_nb if use_numba else _conv3d_fwd_np
    return fn(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, ox, oy, oz), xp


def conv3d_backward(g, xp, w, stride=1, pad=0, use_numba=None, input_grad=True):
    """Gradients (input, weight, bias) of a conv3d given upstream ``g``.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    use_numba = USE_NUMBA if use_numba is None else use_numba
    g = np.ascontiguousarray(g)
    k = w.shape[2]
    if use_numba:
        gxp = _conv3d_grad_input_nb(g, np.ascontiguousarray(w), stride, xp.shape) if input_grad else None
        gw = _conv3d_grad_weight_nb(g, xp, stride, k)
    else:
        gxp = _conv3d_grad_input_np(g, w, stride, xp.shape) if input_grad else None
        gw = _conv3d_grad_weight_np(g, xp, stride, k)
    gb = g.sum(axis=(1, 2, 3))
    if gxp is None:
        return None, gw, gb
    if pad:
        gxp = gxp[:, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp), gw, gb
