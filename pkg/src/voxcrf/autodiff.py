"""A small tape-based reverse-mode core over dense float64 arrays.

Only the operators the voxel network needs are provided: ``conv3d``,
``maxpool3d``, ``relu``, ``add`` and ``softmax``.  Operations executed inside
``with Tape() as tape:`` are recorded; ``tape.backward(out, grad)`` replays
them in reverse and accumulates gradients into leaf tensors that have
``requires_grad`` set.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .kernels.conv import conv3d_forward, conv3d_backward
from .kernels.pool import maxpool3d_forward, maxpool3d_backward

DEBUG_FINITE = os.environ.get("VOXCRF_DEBUG", "0") not in ("", "0")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_active = []


class Tape:
    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)

    def backward(self, output, grad=None):
        """Propagate ``grad`` (default ones) from ``output`` back to the leaves.

        Leaf gradients accumulate across calls; intermediate gradients live
        only for the duration of this call.
        """
        if grad is None:
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != output.shape:
            raise ValueError(f"grad shape {grad.shape} != output shape {output.shape}")
        grads = {id(output): grad}
        if output._node is None and output.requires_grad:
            _accumulate(output, grad)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate(inp, gi)
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi


def _accumulate(t, g):
    t.grad = g.copy() if t.grad is None else t.grad + g


def _record(out, inputs, backward):
    out.requires_grad = any(t.requires_grad for t in inputs)
    if DEBUG_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values produced")
    if _active and out.requires_grad:
        node = _Node(out, inputs, backward)
        out._node = node
        _active[-1].nodes.append(node)
    return out


def conv3d(x, w, b, stride=1, pad=None):
    """Cross-correlation of x (C_in, X, Y, Z) with w (C_out, C_in, k, k, k)."""
    k = w.shape[2]
    if w.ndim != 5 or w.shape[2:] != (k, k, k):
        raise ValueError(f"bad weight shape {w.shape}")
    if x.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"input {x.shape} does not match weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    pad = (k - 1) // 2 if pad is None else pad
    data, xp = conv3d_forward(x.data, w.data, b.data, stride, pad)

    def backward(g):
        return conv3d_backward(g, xp, w.data, stride, pad, input_grad=x.requires_grad)

    return _record(Tensor(data), (x, w, b), backward)


def maxpool3d(x, stride=2):
    """Window-2 max pooling; stride 2 halves dims, stride 1 preserves them."""
    if stride == 2 and any(n % 2 for n in x.shape[1:]):
        raise ValueError(f"spatial dims {x.shape[1:]} not divisible by 2")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    data, arg = maxpool3d_forward(x.data, stride)
    shape = x.shape

    def backward(g):
        return (maxpool3d_backward(g, arg, shape),)

    return _record(Tensor(data), (x,), backward)


def relu(x):
    mask = x.data > 0
    return _record(Tensor(np.where(mask, x.data, 0.0)), (x,), lambda g: (g * mask,))


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


residual_add = add


def softmax_array(z, axis=0):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, g, axis=0):
    return p * (g - (g * p).sum(axis=axis, keepdims=True))


def softmax(x, axis=0):
    """Softmax over the label axis (axis 0 for (L, ...) score volumes)."""
    if x.shape[axis] < 2:
        raise ValueError("softmax needs at least two labels")
    p = softmax_array(x.data, axis)
    return _record(Tensor(p), (x,), lambda g: (softmax_backward(p, g, axis),))


class SGD:
    """Momentum SGD: v <- momentum * v + lr * mult * g;  p <- p - v."""

    def __init__(self, params, lr, momentum=0.9, lr_mult=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.lr_mult = dict(lr_mult or {})
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        for i, p in enumerate(self.params):
            g = p.grad if grads is None else grads[i]
            if g is None:
                continue
            rate = self.lr * self.lr_mult.get(p.name, 1.0)
            v = self.velocity[i]
            v *= self.momentum
            v += rate * g
            p.data = p.data - v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """Functional form of one momentum step; returns (params, velocity)."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_v = [momentum * v + lr * g for v, g in zip(velocity, grads)]
    return [p - v for p, v in zip(params, new_v)], new_v


# --- checkpoint file -------------------------------------------------------
# magic, u32 version, u32 count, then per tensor:
#   u16 name length, utf-8 name, u32 ndim, ndim x u32 dims, float64 LE data

MAGIC = b"VXCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors):
    """Write an ordered mapping name -> array."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = arr.astype(np.float64)
    return out
