"""The voxel network: per-voxel class logits at 1/D spatial resolution.

Layer sequence::

    conv k3 -> relu -> pool s2 (x log2 D) -> residual block x R
            -> pool s1 -> pool s1 -> conv k1 (-> L logits)

A residual block is conv k3 -> relu -> conv k3, added to the (projected when
the width changes) input, then relu.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class FcnnConfig:
    in_channels: int = 4
    label_count: int = 5
    widths: tuple = (16, 32, 32, 32)
    downsample: int = 4
    residual_blocks: int = 3
    convs_per_block: int = 2

    def __post_init__(self):
        if not 1 <= self.in_channels <= 5:
            raise ValueError("in_channels must be 1..5")
        if self.label_count < 2:
            raise ValueError("need at least two labels")
        d = self.downsample
        if d < 1 or d & (d - 1):
            raise ValueError("downsample must be a power of two")
        if len(self.widths) != self.residual_blocks + 1:
            raise ValueError("widths needs one entry for the stem plus one per residual block")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")

    @property
    def destructive_pools(self):
        return int(round(math.log2(self.downsample)))


@dataclass
class VoxelScores:
    logits: ad.Tensor  # (L, nx/D, ny/D, nz/D)
    origin: np.ndarray
    voxel_size: float  # coarse size, D * fine voxel size

    @property
    def dims(self):
        return self.logits.shape[1:]


class Network:
    """Parameters plus forward/backward for one :class:`FcnnConfig`."""

    def __init__(self, config, params):
        self.config = config
        self.params = params  # name -> Tensor, insertion-ordered
        self._tape = None
        self._out = None

    @classmethod
    def build(cls, config, seed=0):
        rng = np.random.default_rng(seed)
        params = {}

        def conv(name, cin, cout, k):
            fan_in = cin * k ** 3
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))
            params[f"{name}.w"] = ad.Tensor(w, True, f"{name}.w")
            params[f"{name}.b"] = ad.Tensor(np.zeros(cout), True, f"{name}.b")

        w = config.widths
        conv("stem", config.in_channels, w[0], 3)
        for r in range(config.residual_blocks):
            cin, cout = w[r], w[r + 1]
            for c in range(config.convs_per_block):
                conv(f"res{r}.conv{c}", cin if c == 0 else cout, cout, 3)
            if cin != cout:
                conv(f"res{r}.proj", cin, cout, 1)
        conv("head", w[-1], config.label_count, 1)
        return cls(config, params)

    def output_dims(self, dims):
        d = self.config.downsample
        return tuple(n // d for n in dims)

    def forward(self, grid_or_array, origin=None, voxel_size=None):
        """Run the network on a VoxelGrid (or a raw (C, X, Y, Z) array)."""
        if hasattr(grid_or_array, "channels"):
            x = grid_or_array.channels
            origin = grid_or_array.origin
            voxel_size = grid_or_array.voxel_size
        else:
            x = np.asarray(grid_or_array, dtype=np.float64)
        cfg = self.config
        if x.ndim != 4 or x.shape[0] != cfg.in_channels:
            raise ValueError(f"expected ({cfg.in_channels}, X, Y, Z) input, got {x.shape}")
        if any(n % cfg.downsample for n in x.shape[1:]):
            raise ValueError(f"dims {x.shape[1:]} not divisible by {cfg.downsample}")
        p = self.params
        tape = ad.Tape()
        with tape:
            h = ad.Tensor(x)
            h = ad.relu(ad.conv3d(h, p["stem.w"], p["stem.b"]))
            for _ in range(cfg.destructive_pools):
                h = ad.maxpool3d(h, stride=2)
            for r in range(cfg.residual_blocks):
                skip = h
                for c in range(cfg.convs_per_block):
                    h = ad.conv3d(h, p[f"res{r}.conv{c}.w"], p[f"res{r}.conv{c}.b"])
                    if c < cfg.convs_per_block - 1:
                        h = ad.relu(h)
                if f"res{r}.proj.w" in p:
                    skip = ad.conv3d(skip, p[f"res{r}.proj.w"], p[f"res{r}.proj.b"])
                h = ad.relu(ad.residual_add(h, skip))
            h = ad.maxpool3d(h, stride=1)
            h = ad.maxpool3d(h, stride=1)
            out = ad.conv3d(h, p["head.w"], p["head.b"])
        self._tape, self._out = tape, out
        coarse = None if voxel_size is None else voxel_size * cfg.downsample
        return VoxelScores(out, None if origin is None else np.asarray(origin), coarse)

    def backward(self, grad_logits):
        """Accumulate parameter gradients for the last forward; returns name -> grad."""
        if self._tape is None:
            raise RuntimeError("backward called before forward")
        self._tape.backward(self._out, grad_logits)
        return {k: t.grad for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state):
        for k, t in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks {k}")
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def clone(self):
        params = {k: ad.Tensor(t.data.copy(), True, k) for k, t in self.params.items()}
        return Network(self.config, params)
