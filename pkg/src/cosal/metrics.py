"""Saliency evaluation: MAE, precision/recall, PR curve, adaptive F-measure.

Binarisation is strict: a pixel is predicted salient when ``P > t``.
Empty predictions have precision 1; an all-background mask has recall 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

BETA2 = 0.3
N_THRESHOLDS = 256
THRESHOLDS = np.linspace(0.0, 1.0, N_THRESHOLDS)


def _check(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {y.shape}")
    return p, y


def mae(p, y):
    p, y = _check(p, y)
    # exactly rounded sum, so the result does not depend on summation order
    return math.fsum(np.abs(p - y).ravel().tolist()) / p.size


def _pr(pred, y):
    tp = np.count_nonzero(pred & y)
    fp = np.count_nonzero(pred & ~y)
    fn = np.count_nonzero(~pred & y)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def pr_at_threshold(p, y, t):
    p, y = _check(p, y)
    return _pr(p > t, y)


def f_beta(precision, recall, beta2=BETA2):
    den = beta2 * precision + recall
    return 0.0 if den == 0 else (1 + beta2) * precision * recall / den


def adaptive_threshold(p):
    return min(1.0, 2.0 * float(np.mean(p)))


def f_measure_adaptive(p, y, beta2=BETA2):
    return adaptive_scores(p, y, beta2)[2]


def adaptive_scores(p, y, beta2=BETA2):
    """(precision, recall, F) at the adaptive threshold."""
    p, y = _check(p, y)
    prec, rec = _pr(p > adaptive_threshold(p), y)
    return prec, rec, f_beta(prec, rec, beta2)


def pr_curve(p, y, thresholds=THRESHOLDS):
    """Precision and recall at every threshold, via one sort instead of 256 passes."""
    p, y = _check(p, y)
    pv = p.reshape(-1)
    yv = y.reshape(-1)
    order = np.argsort(pv, kind="stable")
    ps = pv[order]
    pos_sorted = yv[order].astype(np.int64)
    # number of pixels with value > t  ==  n - searchsorted(ps, t, 'right')
    n = pv.size
    cut = np.searchsorted(ps, thresholds, side="right")
    pos_suffix = np.concatenate([np.cumsum(pos_sorted[::-1])[::-1], [0]])
    tp = pos_suffix[cut]
    npred = n - cut
    n_pos = int(yv.sum())
    precision = np.where(npred == 0, 1.0, tp / np.maximum(npred, 1))
    recall = np.ones_like(precision) if n_pos == 0 else tp / n_pos
    return precision, recall


@dataclass
class EvalReport:
    mae: float
    precision: float
    recall: float
    f_measure: float
    pr_curve: list = field(default_factory=list)  # [(threshold, precision, recall), ...]
    n_images: int = 0

    def to_json(self):
        d = asdict(self)
        d["pr_curve"] = [[float(t), float(p), float(r)] for t, p, r in self.pr_curve]
        return json.dumps(d, indent=1)

    def to_text(self):
        lines = [f"{'images':<12}{self.n_images:>10d}"]
        for key in ("f_measure", "precision", "recall", "mae"):
            lines.append(f"{key:<12}{getattr(self, key):>10.4f}")
        return "\n".join(lines) + "\n"

    def pr_csv(self):
        rows = ["threshold,precision,recall"]
        rows += [f"{t:.6f},{p:.6f},{r:.6f}" for t, p, r in self.pr_curve]
        return "\n".join(rows) + "\n"


def evaluate_pair(p, y):
    prec, rec, f = adaptive_scores(p, y)
    return {"mae": mae(p, y), "precision": prec, "recall": rec, "f_measure": f}


def evaluate_dataset(predictions, ground_truths):
    """Macro average: per-image metrics, then the mean; PR curves averaged pointwise."""
    predictions = list(predictions)
    ground_truths = list(ground_truths)
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} predictions vs {len(ground_truths)} ground truths")
    if not predictions:
        raise ValueError("evaluate_dataset: no images")
    rows = [evaluate_pair(p, y) for p, y in zip(predictions, ground_truths)]
    curves = [pr_curve(p, y) for p, y in zip(predictions, ground_truths)]
    prec = np.mean([c[0] for c in curves], axis=0)
    rec = np.mean([c[1] for c in curves], axis=0)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return EvalReport(pr_curve=list(zip(THRESHOLDS.tolist(), prec.tolist(), rec.tolist())),
                      n_images=len(rows), **mean)
