"""Triplet construction for the RFM branch.

Offline: jitter co-salient ground-truth boxes into positives; draw negatives
from jittered distractors and background boxes. Online: rank decoded RPN
proposals by their training loss, suppress near-duplicates with NMS, and gate
the survivors into hard positives and hard negatives.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import coverage_matrix, jaccard_matrix, nms


@dataclass
class SamplingConfig:
    pos_iou: float = 0.5
    neg_iou: float = 0.1
    n_positive: int = 32
    n_negative: int = 96
    n_triplets: int = 128
    max_draws: int = 1000
    # region side range as fractions of the image side (sqrt of area)
    min_side_frac: float = 0.25
    max_side_frac: float = 1.0
    min_ratio: float = 0.5
    max_ratio: float = 2.0
    jitter_scale: float = 0.35   # log-uniform half-range on w and h
    jitter_shift: float = 0.2    # center shift as a fraction of w / h
    contain_frac: float = 0.5    # an object counts as inside a region above this coverage
    online_nms_iou: float = 0.7


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    weight: float
    anchor_gt: int
    positive_gt: int


@dataclass
class TripletBatch:
    """Triplets plus the de-duplicated region table they index into.

    ``regions[index[i]]`` are the (anchor, positive, negative) boxes of triplet i.
    """
    regions: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    index: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.intp))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gt_of_region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    n_positive: int = 0
    n_negative: int = 0
    shortfall: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i):
        a, p, n = self.index[i]
        return Triplet(self.regions[a], self.regions[p], self.regions[n], float(self.weights[i]),
                       int(self.gt_of_region[a]), int(self.gt_of_region[p]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def positives(self):
        return self.regions[:self.n_positive]

    @property
    def negatives(self):
        return self.regions[self.n_positive:self.n_positive + self.n_negative]


def _boxes_of(sample):
    gt = np.asarray(sample.cosalient_boxes(), dtype=np.float64).reshape(-1, 4)
    other = np.asarray(sample.distractor_boxes(), dtype=np.float64).reshape(-1, 4)
    return gt, other


def matched_gt(regions, gt_boxes):
    """Argmax-IoU gt per region (ties -> lower index) and that IoU."""
    iou = jaccard_matrix(regions, gt_boxes)
    idx = np.argmax(iou, axis=1)
    return idx, iou[np.arange(len(idx)), idx]


def positive_gate(regions, gt_boxes, other_boxes, cfg):
    """Mask of regions matching one co-salient gt above ``pos_iou`` and containing no other object."""
    regions = np.reshape(regions, (-1, 4))
    if len(regions) == 0:
        return np.zeros(0, dtype=bool), np.zeros(0, dtype=np.intp), np.zeros(0)
    idx, ov = matched_gt(regions, gt_boxes)
    objects = np.concatenate([gt_boxes, other_boxes]) if len(other_boxes) else gt_boxes
    inside = coverage_matrix(regions, objects) >= cfg.contain_frac
    inside[np.arange(len(regions)), idx] = True
    ok = (ov > cfg.pos_iou) & (inside.sum(axis=1) == 1)
    return ok, idx, ov


def negative_gate(regions, gt_boxes, cfg):
    regions = np.reshape(regions, (-1, 4))
    if len(regions) == 0:
        return np.zeros(0, dtype=bool)
    return jaccard_matrix(regions, gt_boxes).max(axis=1) < cfg.neg_iou


def _shape_ok(regions, side, cfg):
    w, h = regions[:, 2], regions[:, 3]
    s = np.sqrt(w * h)
    r = h / w
    return ((s >= cfg.min_side_frac * side) & (s <= cfg.max_side_frac * side)
            & (r >= cfg.min_ratio) & (r <= cfg.max_ratio))


def _jitter(rng, boxes, n, cfg):
    src = rng.integers(len(boxes), size=n)
    b = boxes[src]
    sw = np.exp(rng.uniform(-cfg.jitter_scale, cfg.jitter_scale, size=n))
    sh = np.exp(rng.uniform(-cfg.jitter_scale, cfg.jitter_scale, size=n))
    dx = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift, size=n) * b[:, 2]
    dy = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift, size=n) * b[:, 3]
    return np.stack([b[:, 0] + dx, b[:, 1] + dy, b[:, 2] * sw, b[:, 3] * sh], axis=1)


def _background(rng, side, n, cfg):
    lo, hi = cfg.min_side_frac * side, cfg.max_side_frac * side
    s = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    r = np.exp(rng.uniform(np.log(cfg.min_ratio), np.log(cfg.max_ratio), size=n))
    w = np.minimum(s / np.sqrt(r), side)
    h = np.minimum(s * np.sqrt(r), side)
    cx = w / 2 + rng.uniform(0, 1, size=n) * (side - w)
    cy = h / 2 + rng.uniform(0, 1, size=n) * (side - h)
    return np.stack([cx, cy, w, h], axis=1)


def triplet_weight(anchor_box, positive_box, gt_boxes):
    """Product of each box's IoU with its matched (argmax) ground-truth box."""
    gt = np.reshape(np.asarray(gt_boxes, dtype=np.float64), (-1, 4))
    _, ov = matched_gt(np.stack([np.asarray(anchor_box, float), np.asarray(positive_box, float)]), gt)
    return float(ov[0] * ov[1])


def offline_triplets(sample, rng, cfg=SamplingConfig()):
    gt, other = _boxes_of(sample)
    return offline_triplets_from_boxes(gt, other, sample.side, rng, cfg)


def offline_triplets_from_boxes(gt, other, side, rng, cfg=SamplingConfig()):
    """Jitter-based triplets: ``n_positive`` positives, ``n_negative`` negatives,
    ``n_triplets`` random (anchor, positive, negative) picks.

    Each category gets ``max_draws`` candidate draws; short categories are
    reported in ``shortfall`` rather than raised.
    """
    gt = np.reshape(np.asarray(gt, dtype=np.float64), (-1, 4))
    other = np.reshape(np.asarray(other, dtype=np.float64), (-1, 4))
    shortfall = {}

    cand = _jitter(rng, gt, cfg.max_draws, cfg)
    ok, gidx, ov = positive_gate(cand, gt, other, cfg)
    ok &= _shape_ok(cand, side, cfg)
    sel = np.flatnonzero(ok)[:cfg.n_positive]
    positives, pos_gt, pos_ov = cand[sel], gidx[sel], ov[sel]
    if len(positives) < cfg.n_positive:
        shortfall["positive"] = cfg.n_positive - len(positives)

    negs = []
    if len(other):
        cand = _jitter(rng, other, cfg.max_draws, cfg)
        ok = negative_gate(cand, gt, cfg) & _shape_ok(cand, side, cfg)
        negs.append(cand[ok][:cfg.n_negative // 2])
    cand = _background(rng, side, cfg.max_draws, cfg)
    ok = negative_gate(cand, gt, cfg) & _shape_ok(cand, side, cfg)
    have = sum(len(n) for n in negs)
    negs.append(cand[ok][:cfg.n_negative - have])
    negatives = np.concatenate(negs) if negs else np.zeros((0, 4))
    if len(negatives) < cfg.n_negative:
        shortfall["negative"] = cfg.n_negative - len(negatives)

    batch = TripletBatch(regions=np.concatenate([positives, negatives]),
                         gt_of_region=np.concatenate([pos_gt, np.full(len(negatives), -1)]).astype(np.intp),
                         n_positive=len(positives), n_negative=len(negatives), shortfall=shortfall)
    if len(positives) < 2 or len(negatives) == 0:
        shortfall["triplet"] = cfg.n_triplets
        return batch
    index = np.empty((cfg.n_triplets, 3), dtype=np.intp)
    for t in range(cfg.n_triplets):
        a, p = rng.choice(len(positives), size=2, replace=False)
        index[t] = (a, p, len(positives) + rng.integers(len(negatives)))
    batch.index = index
    batch.weights = pos_ov[index[:, 0]] * pos_ov[index[:, 1]]
    return batch


def online_triplets(sample, proposals, region_losses, rng=None, cfg=SamplingConfig()):
    gt, other = _boxes_of(sample)
    return online_triplets_from_boxes(gt, other, sample.side, proposals, region_losses, cfg)


def hard_pair_order(n):
    """Ordered (i, j), i != j, hardest first: by rank sum, then by i."""
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    pairs.sort(key=lambda ij: (ij[0] + ij[1], ij[0]))
    return pairs


def online_triplets_from_boxes(gt, other, side, proposals, region_losses, cfg=SamplingConfig()):
    """Hard-example triplets from scored proposals.

    Proposals are clipped to the image and those under one pixel per side are
    dropped. Survivors of loss-ranked NMS are gated exactly like offline
    samples; anchor/positive pairs are formed hardest-first and each pair gets
    the next hardest negative, cycling, up to ``n_triplets``.
    """
    gt = np.reshape(np.asarray(gt, dtype=np.float64), (-1, 4))
    other = np.reshape(np.asarray(other, dtype=np.float64), (-1, 4))
    props = np.reshape(np.asarray(proposals, dtype=np.float64), (-1, 4))
    losses = np.asarray(region_losses, dtype=np.float64).reshape(-1)
    if len(props) != len(losses):
        raise ValueError(f"online_triplets: {len(props)} proposals vs {len(losses)} losses")

    x1 = np.clip(props[:, 0] - props[:, 2] / 2, 0, side)
    y1 = np.clip(props[:, 1] - props[:, 3] / 2, 0, side)
    x2 = np.clip(props[:, 0] + props[:, 2] / 2, 0, side)
    y2 = np.clip(props[:, 1] + props[:, 3] / 2, 0, side)
    clipped = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1)
    usable = np.all(np.isfinite(clipped), axis=1) & (clipped[:, 2] >= 1) & (clipped[:, 3] >= 1)
    usable &= np.isfinite(losses)
    ids = np.flatnonzero(usable)
    keep = ids[nms(clipped[ids], losses[ids], cfg.online_nms_iou)]
    regions = clipped[keep]

    pos_ok, gidx, ov = positive_gate(regions, gt, other, cfg)
    neg_ok = negative_gate(regions, gt, cfg)
    pos = np.flatnonzero(pos_ok)
    neg = np.flatnonzero(neg_ok)
    table = np.concatenate([regions[pos], regions[neg]])
    batch = TripletBatch(regions=table,
                         gt_of_region=np.concatenate([gidx[pos], np.full(len(neg), -1)]).astype(np.intp),
                         n_positive=len(pos), n_negative=len(neg))
    if len(pos) < 2 or len(neg) == 0:
        return batch
    # hard-pair enumeration is quadratic; only the top ranks can ever be used
    n_pos_used = min(len(pos), cfg.n_triplets + 1)
    pairs = hard_pair_order(n_pos_used)[:cfg.n_triplets]
    index = np.array([(i, j, len(pos) + k % len(neg)) for k, (i, j) in enumerate(pairs)], dtype=np.intp)
    batch.index = index
    batch.weights = ov[pos][index[:, 0]] * ov[pos][index[:, 1]]
    return batch
