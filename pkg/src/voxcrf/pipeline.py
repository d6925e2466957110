"""Crop preparation, inference and evaluation shared by training and the CLI."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import crf as crflib
from .augment import random_augment
from .cloud import crop_subareas
from .metrics import accumulate, confusion_matrix, scores
from .trilinear import compute_weights, interpolate
from .voxelizer import build_grid


@dataclass
class Sample:
    """One voxelized crop with its interpolation weights."""

    grid: object
    weights: object
    positions: np.ndarray
    colors: np.ndarray | None
    labels: np.ndarray | None
    index: np.ndarray  # rows in the source cloud


def channel_count(cloud):
    return 1 + (3 if cloud.colors is not None else 0) + (1 if cloud.intensity is not None else 0)


def prepare(crop, index, run, downsample, stats=None):
    grid = build_grid(crop, run.voxel_size, stats, pad_to=downsample, max_dims=run.max_dims)
    coarse = tuple(n // downsample for n in grid.dims)
    weights = compute_weights(crop.positions, grid.origin, grid.voxel_size * downsample, coarse)
    return Sample(grid, weights, crop.positions, crop.colors, crop.labels, index)


def samples(cloud, run, downsample, stats=None, augment=None, rng=None):
    """Zero-overlap crops of ``cloud`` (optionally augmented first)."""
    if augment is not None:
        cloud = random_augment(cloud, augment, rng)
    out = []
    for crop, _, index in crop_subareas(cloud, run.crop_xy, with_index=True):
        out.append(prepare(crop, index, run, downsample, stats))
    return out


def point_logits(network, sample):
    scores_ = network.forward(sample.grid)
    return interpolate(sample.weights, scores_.logits.data)


def crf_params_for(cfg, label_count, mu=None):
    c = cfg.crf
    return crflib.CrfParams(c.w_s, c.w_b, mu, c.theta_alpha, c.theta_beta, c.theta_gamma,
                            label_count=label_count)


@dataclass
class CloudLogits:
    """Network output for every crop of one cloud, reusable across CRF settings."""

    cloud: object
    crops: list  # [(Sample, (N, L) logits)]


def network_logits(network, cloud, cfg, stats=None):
    crops = [(s, point_logits(network, s))
             for s in samples(cloud, cfg.run, network.config.downsample, stats)]
    return CloudLogits(cloud, crops)


def labels_from_logits(cached, cfg, crf_params=None, iterations=None, backend=None):
    iterations = cfg.crf.test_iters if iterations is None else iterations
    backend = cfg.run.backend if backend is None else backend
    labels = np.full(len(cached.cloud), -1, dtype=np.int64)
    for s, logits in cached.crops:
        if crf_params is None:
            pred = logits.argmax(axis=1)
        else:
            state = crflib.crf_forward(-logits, s.positions, s.colors, crf_params, iterations, backend)
            pred = state.Q.argmax(axis=1)
        labels[s.index] = pred
    return labels


def predict(network, cloud, cfg, crf_params=None, iterations=None, backend=None, stats=None):
    """Per-point labels for ``cloud``; one prediction per point.

    With ``crf_params`` the interpolated unaries are refined by mean-field
    inference (``cfg.crf.test_iters`` iterations by default); otherwise the
    argmax of the interpolated logits is returned.
    """
    cached = network_logits(network, cloud, cfg, stats)
    return labels_from_logits(cached, cfg, crf_params, iterations, backend)


def score_cached(cached_list, label_count, cfg, crf_params=None, iterations=None, backend=None):
    cm = confusion_matrix(label_count)
    preds = []
    for cached in cached_list:
        pred = labels_from_logits(cached, cfg, crf_params, iterations, backend)
        accumulate(cm, cached.cloud.labels, pred)
        preds.append(pred)
    return scores(cm), cm, preds


def evaluate(network, clouds, cfg, crf_params=None, iterations=None, backend=None, stats=None):
    """Scores over a list of labeled clouds, plus the confusion matrix and predictions."""
    cached = [network_logits(network, c, cfg, stats) for c in clouds]
    return score_cached(cached, network.config.label_count, cfg, crf_params, iterations, backend)
