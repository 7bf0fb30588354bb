"""Loss terms: decoder BCE, RPN confidence + smooth-L1 localisation,
weighted triplet loss, and their weighted total.

Functions named ``*_grad`` return ``(value, gradients...)`` for training; the
plain versions return only the value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import NEGATIVE, POSITIVE, encode


@dataclass
class LossConfig:
    alpha: float = 1.0      # decoder weight in the total
    beta: float = 1.0       # RPN weight in the total
    gamma: float = 1.0      # RFM weight in the total
    alpha_loc: float = 1.0  # localisation weight inside the RPN loss
    margin: float = 1.0
    bce_eps: float = 1e-7

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.alpha_loc) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


# --------------------------------------------------------------------------
# decoder


def bce_loss(p, y, eps=1e-7):
    return bce_loss_grad(p, y, eps)[0]


def bce_loss_grad(p, y, eps=1e-7):
    """Mean pixel-wise binary cross-entropy and its gradient w.r.t. ``p``.

    ``p`` is clamped to ``[eps, 1 - eps]``; the gradient is zero where the
    clamp is active.
    """
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"bce_loss: prediction shape {p.shape} != mask shape {y.shape}")
    n = p.size
    pc = np.clip(p, eps, 1 - eps)
    loss = -np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)) / n
    grad = (pc - y) / (pc * (1 - pc)) / n
    grad = np.where((p > eps) & (p < 1 - eps), grad, 0.0).astype(p.dtype, copy=False)
    return float(loss), grad


# --------------------------------------------------------------------------
# RPN


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1, x, np.sign(x))


class RpnLoss(NamedTuple):
    total: float
    conf: float
    loc: float
    conf_grad: np.ndarray = None     # d total / d confidence, (A,)
    offset_grad: np.ndarray = None   # d total / d offset prediction, (A, 4)


def rpn_targets(assignment, gt_boxes, anchors):
    """Encoded regression targets for every anchor (rows of non-positives are 0)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.zeros((len(anchors), 4))
    pos = assignment.positives
    if len(pos):
        targets[pos] = encode(gt[assignment.gt_index[pos]], anchors[pos])
    return targets


def rpn_loss(assignment, confidences, offset_preds, gt_boxes, anchors, config=LossConfig(), with_grad=False):
    """``(conf + alpha_loc * loc) / N`` with N the number of positive anchors.

    ``conf`` sums BCE over positive and negative anchors; ``loc`` sums the
    four-component smooth-L1 over positives. Both parts are returned unnormalised.
    """
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    l = np.asarray(offset_preds, dtype=np.float64).reshape(-1, 4)
    labels = assignment.labels
    pos = labels == POSITIVE
    n = int(pos.sum())
    if n == 0:
        raise ValueError("rpn_loss: no matched (positive) anchors")
    counted = pos | (labels == NEGATIVE)
    t = pos.astype(np.float64)
    eps = config.bce_eps
    cc = np.clip(c, eps, 1 - eps)
    bce = -(t * np.log(cc) + (1 - t) * np.log(1 - cc))
    conf = float(np.sum(bce[counted]))
    diff = l - rpn_targets(assignment, gt_boxes, anchors)
    loc = float(np.sum(smooth_l1(diff[pos])))
    total = (conf + config.alpha_loc * loc) / n
    if not with_grad:
        return RpnLoss(total, conf, loc)
    dc = np.where(counted & (c > eps) & (c < 1 - eps), (cc - t) / (cc * (1 - cc)), 0.0) / n
    dl = np.zeros_like(l)
    dl[pos] = config.alpha_loc * smooth_l1_grad(diff[pos]) / n
    return RpnLoss(total, conf, loc, dc, dl)


def per_anchor_rpn_loss(assignment, confidences, offset_preds, gt_boxes, anchors, config=LossConfig()):
    """Per-anchor hardness used for online mining.

    Confidence BCE against the anchor's label (ignored anchors count as
    non-salient) plus the smooth-L1 localisation loss for positives.
    """
    c = np.clip(np.asarray(confidences, dtype=np.float64).reshape(-1), config.bce_eps, 1 - config.bce_eps)
    l = np.asarray(offset_preds, dtype=np.float64).reshape(-1, 4)
    pos = assignment.labels == POSITIVE
    t = pos.astype(np.float64)
    conf = -(t * np.log(c) + (1 - t) * np.log(1 - c))
    loc = np.sum(smooth_l1(l - rpn_targets(assignment, gt_boxes, anchors)), axis=1)
    return conf + config.alpha_loc * np.where(pos, loc, 0.0)


# --------------------------------------------------------------------------
# RFM


def _sqdist(a, b):
    d = a - b
    return np.sum(d * d, axis=-1)


def triplet_loss(va, vp, vn, margin=1.0):
    va, vp, vn = (np.asarray(v, dtype=np.float64) for v in (va, vp, vn))
    if not (va.shape == vp.shape == vn.shape):
        raise ValueError(f"triplet_loss: embedding shapes differ {va.shape}, {vp.shape}, {vn.shape}")
    out = np.maximum(_sqdist(va, vp) - _sqdist(va, vn) + margin, 0.0)
    return float(out) if out.ndim == 0 else out


def weighted_triplet_loss_grad(weights, va, vp, vn, margin=1.0):
    """``sum_i w_i * hinge_i / max(1, T)`` and gradients for ``(T, E)`` embeddings.

    The hinge subgradient at exactly zero is taken as 0.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    t = len(weights)
    if t == 0:
        z = np.zeros_like(va)
        return 0.0, z, z.copy(), z.copy()
    if not (va.shape == vp.shape == vn.shape) or va.shape[0] != t:
        raise ValueError(f"rfm_loss: embedding shapes {va.shape}, {vp.shape}, {vn.shape} for {t} triplets")
    raw = _sqdist(va, vp) - _sqdist(va, vn) + margin
    active = raw > 0
    loss = float(np.sum(weights * np.where(active, raw, 0.0)) / max(1, t))
    coef = (weights * active / max(1, t))[:, None]
    dva = coef * 2 * ((va - vp) - (va - vn))
    dvp = coef * -2 * (va - vp)
    dvn = coef * 2 * (va - vn)
    return loss, dva.astype(va.dtype), dvp.astype(va.dtype), dvn.astype(va.dtype)


def rfm_loss(triplets, embeddings, margin=1.0):
    """Weighted mean triplet loss; ``embeddings`` holds one (a, p, n) triple per triplet."""
    triplets = list(triplets)
    if not triplets:
        return 0.0
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 3 or emb.shape[:2] != (len(triplets), 3):
        raise ValueError(f"rfm_loss: expected ({len(triplets)}, 3, E) embeddings, got {emb.shape}")
    weights = [tr.weight for tr in triplets]
    return weighted_triplet_loss_grad(weights, emb[:, 0], emb[:, 1], emb[:, 2], margin)[0]


def total_loss(decoder, rpn, rfm, config=LossConfig()):
    return config.alpha * decoder + config.beta * rpn + config.gamma * rfm
