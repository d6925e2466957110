"""Two-stage training, the point-level loss, checkpoints and the theta_alpha search.

Stage 1 trains the network through trilinear interpolation alone.  Stage 2
inserts the CRF (unrolled mean-field) before the loss and updates network
and CRF parameters jointly, with separate learning-rate multipliers for the
kernel weights and the compatibility matrix.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import crf as crflib
from .config import check_theta_alpha_candidates
from .fcnn import FcnnConfig, Network
from .metrics import accumulate, confusion_matrix, scores
from .pipeline import channel_count, crf_params_for, network_logits, point_logits, samples, score_cached
from .trilinear import splat
from .voxelizer import IntensityStats

log = logging.getLogger(__name__)


# --- loss ------------------------------------------------------------------

def _labeled(labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != n:
        raise ValueError("labels and scores differ in length")
    keep = labels >= 0
    if not keep.any():
        raise ValueError("every point is unlabeled")
    return labels, keep


def kl_loss(probs, labels, eps=1e-300):
    """Mean -log p(true label) over labeled points; returns (loss, dloss/dprobs)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels, keep = _labeled(labels, len(probs))
    idx = np.flatnonzero(keep)
    n = len(idx)
    p_true = np.maximum(probs[idx, labels[idx]], eps)
    grad = np.zeros_like(probs)
    grad[idx, labels[idx]] = -1.0 / (n * p_true)
    return float(-np.log(p_true).sum() / n), grad


def kl_loss_logits(logits, labels):
    """Same loss with probs = softmax(logits); returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels, keep = _labeled(labels, len(logits))
    idx = np.flatnonzero(keep)
    n = len(idx)
    z = logits[idx] - logits[idx].max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels[idx]].sum() / n)
    grad = np.zeros_like(logits)
    g = np.exp(logp)
    g[np.arange(n), labels[idx]] -= 1.0
    grad[idx] = g / n
    return loss, grad


# --- model bundle ----------------------------------------------------------

@dataclass
class Model:
    network: Network
    crf: crflib.CrfParams
    voxel_size: float
    stats: IntensityStats | None = None


def build_model(cfg, clouds):
    """Fresh network sized for ``clouds`` (channels and label count)."""
    if not clouds:
        raise ValueError("empty dataset")
    first = clouds[0]
    label_count = max(c.label_count for c in clouds)
    net_cfg = replace(cfg.network, in_channels=channel_count(first), label_count=label_count)
    stats = None
    if first.intensity is not None:
        stats = IntensityStats.from_values(np.concatenate([c.intensity for c in clouds]))
    network = Network.build(net_cfg, seed=cfg.run.seed)
    return Model(network, crf_params_for(cfg, label_count), cfg.run.voxel_size, stats)


_META_FIELDS = ("in_channels", "label_count", "downsample", "residual_blocks", "convs_per_block")


def save_model(path, model):
    tensors = dict(model.network.state())
    c = model.crf
    tensors["crf.w_s"] = np.array(c.w_s)
    tensors["crf.w_b"] = np.array(c.w_b)
    tensors["crf.mu"] = c.mu
    tensors["crf.theta"] = np.array([c.theta_alpha, c.theta_beta, c.theta_gamma])
    cfg = model.network.config
    tensors["meta.network"] = np.array([getattr(cfg, k) for k in _META_FIELDS], dtype=np.float64)
    tensors["meta.widths"] = np.array(cfg.widths, dtype=np.float64)
    tensors["meta.voxel_size"] = np.array(model.voxel_size)
    if model.stats is not None:
        tensors["meta.intensity"] = np.array([model.stats.mean, model.stats.range])
    ad.save_checkpoint(path, tensors)


def load_model(path):
    t = ad.load_checkpoint(path)
    try:
        meta = dict(zip(_META_FIELDS, (int(v) for v in t["meta.network"])))
        widths = tuple(int(v) for v in t["meta.widths"])
        net = Network.build(FcnnConfig(widths=widths, **meta))
        net.load_state({k: v for k, v in t.items() if not k.startswith(("crf.", "meta."))})
        theta = t["crf.theta"]
        params = crflib.CrfParams(float(t["crf.w_s"]), float(t["crf.w_b"]), t["crf.mu"],
                                  float(theta[0]), float(theta[1]), float(theta[2]))
        stats = None
        if "meta.intensity" in t:
            stats = IntensityStats(*map(float, t["meta.intensity"]))
        return Model(net, params, float(t["meta.voxel_size"]), stats)
    except KeyError as exc:
        raise ad.CheckpointError(f"{path}: missing entry {exc}") from None


# --- loss curves -----------------------------------------------------------

CURVE_FIELDS = ("stage", "epoch", "split", "loss", "mIOU")


def write_curve(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_FIELDS})


# --- stage 1 ---------------------------------------------------------------

def _rng(cfg, stage):
    return np.random.default_rng([cfg.run.seed, stage])


def stage1(model, clouds, cfg, callback=None):
    """Train the network through trilinear interpolation; returns the loss curve."""
    if not clouds:
        raise ValueError("empty dataset")
    sc = cfg.stage1
    net = model.network
    opt = ad.SGD(list(net.params.values()), sc.lr, sc.momentum)
    rng = _rng(cfg, 1)
    L = net.config.label_count
    curve = []
    for epoch in range(sc.epochs):
        opt.lr = sc.lr_at(epoch)
        order = rng.permutation(len(clouds))
        losses, cm = [], confusion_matrix(L)
        for i in order:
            for s in samples(clouds[i], cfg.run, net.config.downsample, model.stats, cfg.augment, rng):
                if s.labels is None or not np.any(s.labels >= 0):
                    continue
                logits = point_logits(net, s)
                loss, g = kl_loss_logits(logits, s.labels)
                net.zero_grad()
                net.backward(splat(s.weights, g))
                opt.step()
                losses.append(loss)
                accumulate(cm, s.labels, logits.argmax(axis=1))
        row = {"stage": 1, "epoch": epoch, "split": "train",
               "loss": float(np.mean(losses)) if losses else float("nan"),
               "mIOU": float(scores(cm).mean_iou) if cm.sum() else float("nan")}
        curve.append(row)
        log.info("stage1 epoch %d lr %.3g loss %.4f mIOU %.4f", epoch, opt.lr, row["loss"], row["mIOU"])
        if callback is not None:
            callback(row)
    return curve


# --- stage 2 ---------------------------------------------------------------

class CrfTensors:
    """Learnable CRF parameters exposed as autodiff leaves for the optimizer."""

    def __init__(self, params):
        self.w_s = ad.Tensor(np.array(params.w_s), True, "crf.w_s")
        self.w_b = ad.Tensor(np.array(params.w_b), True, "crf.w_b")
        self.mu = ad.Tensor(params.mu.copy(), True, "crf.mu")

    def tensors(self):
        return [self.w_s, self.w_b, self.mu]

    def apply(self, params):
        # kernel weights stay nonnegative
        self.w_s.data = np.maximum(self.w_s.data, 0.0)
        self.w_b.data = np.maximum(self.w_b.data, 0.0)
        return params.copy(w_s=float(self.w_s.data), w_b=float(self.w_b.data),
                           mu=self.mu.data.copy())


def crf_step_grads(model, sample, iterations, backend):
    """Loss and gradients for one crop through network, interpolation and CRF."""
    logits = point_logits(model.network, sample)
    state = crflib.crf_forward(-logits, sample.positions, sample.colors, model.crf, iterations, backend)
    loss, gz = kl_loss_logits(state.logits, sample.labels)
    g = crflib.crf_backward(state, grad_logits=gz)
    return loss, state, g, -g["unary"]


def clip_grad_norm(tensors, max_norm):
    """Scale the gradients of ``tensors`` so their joint L2 norm is at most ``max_norm``."""
    tensors = [t for t in tensors if t.grad is not None]
    norm = float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in tensors)))
    if norm > max_norm:
        for t in tensors:
            t.grad = t.grad * (max_norm / norm)
    return norm


def stage2(model, clouds, cfg, callback=None):
    """Joint training of network and CRF; returns the loss curve.

    With ``stage2.manual`` the CRF keeps its hand-set parameters and nothing
    is trained.
    """
    if not clouds:
        raise ValueError("empty dataset")
    sc = cfg.stage2
    if sc.manual or not sc.enabled:
        return []
    net = model.network
    crf_t = CrfTensors(model.crf)
    mult = {"crf.w_s": sc.kernel_lr_mult, "crf.w_b": sc.kernel_lr_mult, "crf.mu": sc.compat_lr_mult}
    opt = ad.SGD(list(net.params.values()) + crf_t.tensors(), sc.lr, sc.momentum, mult)
    rng = _rng(cfg, 2)
    L = net.config.label_count
    curve = []
    for epoch in range(sc.epochs):
        order = rng.permutation(len(clouds))
        losses, cm = [], confusion_matrix(L)
        for i in order:
            for s in samples(clouds[i], cfg.run, net.config.downsample, model.stats, cfg.augment, rng):
                if s.labels is None or not np.any(s.labels >= 0):
                    continue
                loss, state, g, g_logits = crf_step_grads(model, s, sc.crf_iters, cfg.run.backend)
                opt.zero_grad()
                net.backward(splat(s.weights, g_logits))
                crf_t.w_s.grad = np.array(g["w_s"])
                crf_t.w_b.grad = np.array(g["w_b"])
                crf_t.mu.grad = g["mu"]
                if sc.clip_norm > 0:
                    clip_grad_norm(net.params.values(), sc.clip_norm)
                    clip_grad_norm(crf_t.tensors(), sc.clip_norm)
                opt.step()
                model.crf = crf_t.apply(model.crf)
                log.debug("stage2 step loss %.4f grad w_s %.3g w_b %.3g |mu| %.3g |net| %.3g",
                          loss, g["w_s"], g["w_b"], np.abs(g["mu"]).max(),
                          np.sqrt(sum(float((p.grad ** 2).sum()) for p in net.params.values())))
                losses.append(loss)
                accumulate(cm, s.labels, state.Q.argmax(axis=1))
        row = {"stage": 2, "epoch": epoch, "split": "train",
               "loss": float(np.mean(losses)) if losses else float("nan"),
               "mIOU": float(scores(cm).mean_iou) if cm.sum() else float("nan")}
        curve.append(row)
        log.info("stage2 epoch %d loss %.4f mIOU %.4f w_s %.4f w_b %.4f",
                 epoch, row["loss"], row["mIOU"], model.crf.w_s, model.crf.w_b)
        if callback is not None:
            callback(row)
    return curve


def train(model, clouds, cfg, callback=None):
    curve = stage1(model, clouds, cfg, callback)
    curve += stage2(model, clouds, cfg, callback)
    return curve


# --- theta_alpha search ----------------------------------------------------

def grid_search_theta_alpha(model, clouds, cfg, candidates=None, iterations=None, backend=None):
    """Validation mIOU per candidate; returns (best theta_alpha, {candidate: mIOU}).

    Ties go to the smaller bandwidth.
    """
    candidates = tuple(cfg.gridsearch.candidates if candidates is None else candidates)
    check_theta_alpha_candidates(candidates)
    iterations = cfg.crf.test_iters if iterations is None else iterations
    cached = [network_logits(model.network, c, cfg, model.stats) for c in clouds]
    L = model.network.config.label_count
    table = {}
    for theta in sorted(set(candidates)):
        params = model.crf.copy(theta_alpha=float(theta))
        s, _, _ = score_cached(cached, L, cfg, params, iterations, backend)
        table[theta] = float(s.mean_iou)
    best = max(sorted(table), key=lambda t: (table[t], -t))
    return best, table


def save_run(out_dir, model, curve):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.ckpt", model)
    write_curve(out / "loss_curve.csv", curve)
    return out / "model.ckpt"
