"""Fully connected CRF over points with Gaussian edge potentials.

Pairwise potential between points i and j::

    mu(x_i, x_j) * [ w_s * exp(-|p_i - p_j|^2 / (2 theta_gamma^2))
                   + w_b * exp(-|p_i - p_j|^2 / (2 theta_alpha^2)
                                - |I_i - I_j|^2 / (2 theta_beta^2)) ]

Inference is parallel mean-field, unrolled for a fixed number of iterations
so that gradients with respect to the unaries, the kernel weights and the
compatibility matrix can be back-propagated through every step.

Unary convention: ``unary = -logit``, so with zero coupling the marginals are
``softmax(logit)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import softmax_array, softmax_backward
from .kernels.gauss import BRUTEFORCE_MAX_POINTS, PermutohedralLattice, bruteforce_filter

TRAIN_ITERATIONS = 5
TEST_ITERATIONS = 10
BACKENDS = ("bruteforce", "permutohedral")
_ALIASES = {"lattice": "permutohedral"}


def resolve_backend(name):
    name = _ALIASES.get(name, name)
    if name not in BACKENDS:
        raise ValueError(f"unknown filter backend {name!r}")
    return name


def potts(label_count):
    return 1.0 - np.eye(label_count)


@dataclass
class CrfParams:
    """Kernel weights and compatibility are learnable; bandwidths are fixed."""

    w_s: float = 3.0
    w_b: float = 5.0
    mu: np.ndarray = None
    theta_alpha: float = 0.8   # meters, bilateral position bandwidth
    theta_beta: float = 11.0   # color units
    theta_gamma: float = 0.05  # meters, spatial kernel bandwidth
    label_count: int = field(default=None)

    def __post_init__(self):
        if self.mu is None:
            if self.label_count is None:
                raise ValueError("give mu or label_count")
            self.mu = potts(self.label_count)
        self.mu = np.array(self.mu, dtype=np.float64)
        if self.mu.ndim != 2 or self.mu.shape[0] != self.mu.shape[1]:
            raise ValueError("mu must be square")
        self.label_count = self.mu.shape[0]
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu must be finite")
        for name in ("theta_alpha", "theta_beta", "theta_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def copy(self, **changes):
        changes.setdefault("mu", self.mu.copy())
        return replace(self, **changes)


def spatial_features(points, params):
    return np.asarray(points, dtype=np.float64) / params.theta_gamma


def bilateral_features(points, colors, params):
    if colors is None:
        return None
    p = np.asarray(points, dtype=np.float64) / params.theta_alpha
    c = np.asarray(colors, dtype=np.float64) / params.theta_beta
    return np.hstack([p, c])


class KernelFilter:
    """sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j for a fixed feature set."""

    def __init__(self, features, backend="permutohedral"):
        self.backend = resolve_backend(backend)
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        n = len(self.features)
        if self.backend == "bruteforce":
            if n > BRUTEFORCE_MAX_POINTS:
                raise ValueError(f"bruteforce filtering is capped at {BRUTEFORCE_MAX_POINTS} points, got {n}")
            self._lattice = None
        else:
            self._lattice = PermutohedralLattice(self.features, exclude_self=True)

    def __call__(self, values):
        if self._lattice is None:
            return bruteforce_filter(self.features, values)
        return self._lattice.filter(values)

    def transpose(self, values):
        if self._lattice is None:
            return bruteforce_filter(self.features, values)
        return self._lattice.filter(values, transpose=True)


def gaussian_filter(values, features, backend="bruteforce"):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if len(v) != len(features):
        raise ValueError("values and features differ in length")
    return KernelFilter(features, backend)(v)


@dataclass
class Filters:
    spatial: KernelFilter
    bilateral: KernelFilter | None

    @classmethod
    def build(cls, points, colors, params, backend="permutohedral"):
        fb = bilateral_features(points, colors, params)
        return cls(
            KernelFilter(spatial_features(points, params), backend),
            None if fb is None else KernelFilter(fb, backend),
        )


def _messages(Q, params, filters):
    a = filters.spatial(Q)
    b = filters.bilateral(Q) if filters.bilateral is not None else None
    m = params.w_s * a
    if b is not None:
        m = m + params.w_b * b
    return a, b, m


def meanfield_step(Q, unaries, params, filters):
    """One parallel update: Q+ = softmax(-unary - m @ mu^T)."""
    _, _, m = _messages(Q, params, filters)
    return softmax_array(-unaries - m @ params.mu.T, axis=1)


@dataclass
class MeanFieldState:
    """Everything the backward pass needs from an unrolled forward pass."""

    unaries: np.ndarray
    params: CrfParams
    filters: Filters
    history: list          # Q_0 .. Q_T
    cache: list            # (A_t, B_t, m_t) per iteration
    logits: np.ndarray     # pre-softmax input of the last update, Q_T = softmax(logits)

    @property
    def Q(self):
        return self.history[-1]


def crf_forward(unaries, points, colors, params, iterations=TEST_ITERATIONS,
                backend="permutohedral", filters=None):
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    unaries = np.asarray(unaries, dtype=np.float64)
    if unaries.shape[1] != params.label_count:
        raise ValueError("unaries and compatibility matrix disagree on label count")
    if filters is None:
        filters = Filters.build(points, colors, params, backend)
    Q = softmax_array(-unaries, axis=1)
    history = [Q]
    cache = []
    for _ in range(iterations):
        a, b, m = _messages(Q, params, filters)
        z = -unaries - m @ params.mu.T
        Q = softmax_array(z, axis=1)
        history.append(Q)
        cache.append((a, b, m))
    return MeanFieldState(unaries, params, filters, history, cache, z)


def crf_backward(state, grad_Q=None, grad_logits=None):
    """Gradients of a scalar loss w.r.t. unaries, w_s, w_b and mu.

    Pass either ``grad_Q`` (dLoss/dQ_T) or ``grad_logits``, the gradient with
    respect to ``state.logits``; the latter avoids dividing by tiny
    probabilities when the loss is a log-likelihood.
    """
    if (grad_Q is None) == (grad_logits is None):
        raise ValueError("pass exactly one of grad_Q and grad_logits")
    params, filters = state.params, state.filters
    mu = params.mu
    g_unary = np.zeros_like(state.unaries)
    g_ws = 0.0
    g_wb = 0.0
    g_mu = np.zeros_like(mu)
    gQ = None if grad_Q is None else np.asarray(grad_Q, dtype=np.float64)
    for t in range(len(state.cache) - 1, -1, -1):
        a, b, m = state.cache[t]
        if gQ is None:
            gz = np.asarray(grad_logits, dtype=np.float64)
        else:
            gz = softmax_backward(state.history[t + 1], gQ, axis=1)
        g_unary -= gz
        gM = -gz
        g_mu += gM.T @ m
        gm = gM @ mu
        g_ws += float(np.sum(gm * a))
        gQ = params.w_s * filters.spatial.transpose(gm)
        if b is not None:
            g_wb += float(np.sum(gm * b))
            gQ = gQ + params.w_b * filters.bilateral.transpose(gm)
    g_unary -= softmax_backward(state.history[0], gQ, axis=1)
    return {"unary": g_unary, "w_s": g_ws, "w_b": g_wb, "mu": g_mu}


def energy(labels, unaries, params, points, colors=None):
    """E(x) = sum_i unary_i(x_i) + sum_{i<j} pairwise(x_i, x_j); O(N^2)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n > BRUTEFORCE_MAX_POINTS:
        raise ValueError(f"energy is capped at {BRUTEFORCE_MAX_POINTS} points")
    unaries = np.asarray(unaries, dtype=np.float64)
    e = float(unaries[np.arange(n), labels].sum())
    fs = spatial_features(points, params)
    k = params.w_s * np.exp(-0.5 * _sqdist(fs))
    fb = bilateral_features(points, colors, params)
    if fb is not None:
        k = k + params.w_b * np.exp(-0.5 * _sqdist(fb))
    comp = params.mu[labels[:, None], labels[None, :]]
    iu = np.triu_indices(n, 1)
    return e + float((comp * k)[iu].sum())


def _sqdist(f):
    diff = f[:, None, :] - f[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)
