"""Desk-scale comparison of stage-1, hand-set CRF and end-to-end CRF on synthetic rooms."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import pipeline, train
from .config import desk_config
from .synth import generate, random_room

log = logging.getLogger(__name__)

DATA_SEED = 1000


@dataclass
class SeedResult:
    seed: int
    stage1_miou: float
    manual_miou: float
    stage2_miou: float          # network + CRF after joint training
    stage2_net_miou: float      # the jointly trained network without CRF
    w_s: float
    w_b: float
    seconds: float

    def as_dict(self):
        return asdict(self)


def rooms(count, offset=0, density=600.0):
    return [generate(random_room(DATA_SEED + offset + i, density)) for i in range(count)]


def run_seed(seed, train_rooms, test_rooms, cfg=None):
    cfg = replace(cfg or desk_config(), run=replace((cfg or desk_config()).run, seed=seed))
    t0 = time.perf_counter()
    model = train.build_model(cfg, train_rooms)
    train.stage1(model, train_rooms, cfg)
    L = model.network.config.label_count
    cached = [pipeline.network_logits(model.network, c, cfg, model.stats) for c in test_rooms]
    stage1 = pipeline.score_cached(cached, L, cfg)[0].mean_iou
    manual = pipeline.score_cached(cached, L, cfg, model.crf)[0].mean_iou
    train.stage2(model, train_rooms, cfg)
    cached = [pipeline.network_logits(model.network, c, cfg, model.stats) for c in test_rooms]
    net2 = pipeline.score_cached(cached, L, cfg)[0].mean_iou
    joint = pipeline.score_cached(cached, L, cfg, model.crf)[0].mean_iou
    res = SeedResult(seed, float(stage1), float(manual), float(joint), float(net2),
                     model.crf.w_s, model.crf.w_b, time.perf_counter() - t0)
    log.info("seed %d: %s", seed, res)
    return res


def run(seeds=(0, 1, 2), n_train=15, n_test=5, cfg=None):
    """Train and evaluate once per seed on a fixed set of synthetic rooms."""
    train_rooms = rooms(n_train)
    test_rooms = rooms(n_test, offset=n_train)
    return [run_seed(s, train_rooms, test_rooms, cfg) for s in seeds]


def summarize(results):
    gains = [r.stage2_miou - r.stage1_miou for r in results]
    return {
        "min_stage1_miou": min(r.stage1_miou for r in results),
        "median_stage2_gain": float(np.median(gains)),
        "joint_beats_manual": sum(r.stage2_miou >= r.manual_miou for r in results),
        "seeds": len(results),
    }
