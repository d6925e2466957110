"""Confusion matrix and segmentation scores (per-class acc/IOU, means, global acc)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


def confusion_matrix(label_count):
    return np.zeros((label_count, label_count), dtype=np.int64)


def accumulate(cm, gt, pred):
    """Add (gt, pred) pairs to ``cm`` in place; ground truth -1 is skipped."""
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if gt.shape != pred.shape:
        raise ValueError(f"length mismatch: {len(gt)} ground-truth vs {len(pred)} predicted")
    L = cm.shape[0]
    keep = gt >= 0
    gt, pred = gt[keep], pred[keep]
    if np.any(gt >= L) or np.any(pred >= L) or np.any(pred < 0):
        raise ValueError(f"labels must lie in [0, {L})")
    cm += np.bincount(gt * L + pred, minlength=L * L).reshape(L, L)
    return cm


@dataclass
class Scores:
    acc: list          # per class, None when the class is absent
    iou: list
    mean_acc: object
    mean_iou: object
    global_acc: object
    present: list

    def as_dict(self):
        return {"acc": self.acc, "iou": self.iou, "mAcc": self.mean_acc,
                "mIOU": self.mean_iou, "global_acc": self.global_acc}


def scores(cm, exact=False):
    """Scores from a confusion matrix (rows ground truth, columns prediction).

    Classes with neither ground truth nor predictions are left out of the
    means.  A class that is predicted but never present scores 0 for both
    accuracy and IOU.  ``exact=True`` returns :class:`fractions.Fraction`.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("negative counts")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    div = Fraction if exact else (lambda a, b: a / b)
    L = cm.shape[0]
    acc, iou, present = [], [], []
    for i in range(L):
        tp = int(cm[i, i])
        fn = int(cm[i].sum()) - tp
        fp = int(cm[:, i].sum()) - tp
        if tp + fn + fp == 0:
            acc.append(None)
            iou.append(None)
            continue
        present.append(i)
        acc.append(div(tp, tp + fn) if tp + fn else div(0, 1))
        iou.append(div(tp, tp + fn + fp))
    k = len(present)
    mean_acc = sum(acc[i] for i in present) / k
    mean_iou = sum(iou[i] for i in present) / k
    return Scores(acc, iou, mean_acc, mean_iou, div(int(np.trace(cm)), total), present)


def report_csv(s, names=None):
    names = names or [f"class{i}" for i in range(len(s.acc))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "acc", "iou"])
    for name, a, u in zip(names, s.acc, s.iou):
        w.writerow([name, _fmt(a), _fmt(u)])
    w.writerow(["mean", _fmt(s.mean_acc), _fmt(s.mean_iou)])
    w.writerow(["global_acc", _fmt(s.global_acc), ""])
    return buf.getvalue()


def report_text(s, names=None):
    names = names or [f"class{i}" for i in range(len(s.acc))]
    width = max(8, *(len(n) for n in names))
    lines = [f"{'class':<{width}}  {'acc':>8}  {'IOU':>8}"]
    for name, a, u in zip(names, s.acc, s.iou):
        lines.append(f"{name:<{width}}  {_fmt(a, 4):>8}  {_fmt(u, 4):>8}")
    lines.append("-" * len(lines[0]))
    lines.append(f"{'mean':<{width}}  {_fmt(s.mean_acc, 4):>8}  {_fmt(s.mean_iou, 4):>8}")
    lines.append(f"{'global':<{width}}  {_fmt(s.global_acc, 4):>8}")
    return "\n".join(lines) + "\n"


def _fmt(x, digits=6):
    return "n/a" if x is None else f"{float(x):.{digits}f}"
