"""Boxes, Jaccard overlap, anchors, offset coding, anchor matching and NMS.

Boxes are center form ``(cx, cy, w, h)`` in pixels, either as a :class:`Box`
or as a float array whose last axis has length 4.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1

# Fractions of the input side standing in for 128/256/512 px at ~512 px inputs.
DEFAULT_SCALE_FRACTIONS = (0.25, 0.5, 1.0)
# Aspect ratios as h / w: 1:1, 1:2, 2:1.
DEFAULT_RATIOS = (1.0, 2.0, 0.5)


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self):
        return self.w * self.h


def to_corners(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(corners):
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def jaccard_matrix(a, b):
    """Pairwise IoU between ``a`` (N, 4) and ``b`` (M, 4); returns (N, M)."""
    ca = to_corners(np.reshape(a, (-1, 4)))
    cb = to_corners(np.reshape(b, (-1, 4)))
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def jaccard(a, b):
    return float(jaccard_matrix(a, b)[0, 0])


def coverage_matrix(regions, objects):
    """Fraction of each object's area lying inside each region, shape (R, O)."""
    cr = to_corners(np.reshape(regions, (-1, 4)))
    co = to_corners(np.reshape(objects, (-1, 4)))
    lt = np.maximum(cr[:, None, :2], co[None, :, :2])
    rb = np.minimum(cr[:, None, 2:], co[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    area_o = (co[:, 2] - co[:, 0]) * (co[:, 3] - co[:, 1])
    return wh[..., 0] * wh[..., 1] / area_o[None, :]


# --------------------------------------------------------------------------
# anchors


@dataclass
class AnchorGrid:
    feature_h: int
    feature_w: int
    stride: float
    scales: tuple
    ratios: tuple
    anchors: np.ndarray  # (9 * Hf * Wf, 4), cell-major then scale-major then ratio

    @property
    def per_cell(self):
        return len(self.scales) * len(self.ratios)

    def __len__(self):
        return len(self.anchors)


def scales_from_fractions(side, fractions=DEFAULT_SCALE_FRACTIONS):
    """Anchor side lengths (sqrt of area) for an input side."""
    return tuple(float(side) * f for f in fractions)


def generate_anchors(image_extent, feature_extent, scales, ratios=DEFAULT_RATIOS):
    """Tile ``len(scales) * len(ratios)`` anchors over every feature cell.

    ``scales`` are side lengths in pixels (area ``s**2``); ``ratios`` are h/w.
    Anchors are not clipped to the image.
    """
    ih, iw = (image_extent, image_extent) if np.isscalar(image_extent) else image_extent
    fh, fw = (feature_extent, feature_extent) if np.isscalar(feature_extent) else feature_extent
    if ih % fh or iw % fw or ih // fh != iw // fw:
        raise ValueError(f"image extent {(ih, iw)} is not an integral multiple of feature extent {(fh, fw)}")
    stride = ih // fh
    shapes = []
    for s in scales:
        for r in ratios:
            w = s / np.sqrt(r)
            shapes.append((w, w * r))
    shapes = np.asarray(shapes)
    ys, xs = np.meshgrid((np.arange(fh) + 0.5) * stride, (np.arange(fw) + 0.5) * stride, indexing="ij")
    centers = np.stack([xs, ys], axis=-1).reshape(-1, 1, 2)
    anchors = np.concatenate([np.broadcast_to(centers, (fh * fw, len(shapes), 2)),
                              np.broadcast_to(shapes[None], (fh * fw, len(shapes), 2))], axis=-1)
    return AnchorGrid(fh, fw, float(stride), tuple(scales), tuple(ratios), anchors.reshape(-1, 4).copy())


# --------------------------------------------------------------------------
# offset coding


def encode(g, d):
    g = np.asarray(g, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.stack([(g[..., 0] - d[..., 0]) / d[..., 2],
                     (g[..., 1] - d[..., 1]) / d[..., 3],
                     np.log(g[..., 2] / d[..., 2]),
                     np.log(g[..., 3] / d[..., 3])], axis=-1)


def decode(t, d):
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.stack([t[..., 0] * d[..., 2] + d[..., 0],
                     t[..., 1] * d[..., 3] + d[..., 1],
                     np.exp(t[..., 2]) * d[..., 2],
                     np.exp(t[..., 3]) * d[..., 3]], axis=-1)


# --------------------------------------------------------------------------
# matching


@dataclass
class MatchAssignment:
    labels: np.ndarray      # (A,) int8 in {POSITIVE, NEGATIVE, IGNORE}
    gt_index: np.ndarray    # (A,) matched gt for positives, -1 elsewhere
    max_overlap: np.ndarray  # (A,) best IoU against any gt

    @property
    def positives(self):
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self):
        return np.flatnonzero(self.labels == NEGATIVE)


def match_anchors(anchors, gt_boxes, pos_threshold=0.5, neg_threshold=0.3):
    """Label anchors against ground truth.

    An anchor with IoU > ``pos_threshold`` to any gt is positive (matched to its
    argmax gt, ties to the lower index). Each gt, in index order, additionally
    claims its best anchor not already claimed by an earlier gt, regardless of
    overlap. Remaining anchors below ``neg_threshold`` are negative; the rest
    are ignored.
    """
    anchors = np.reshape(np.asarray(anchors, dtype=np.float64), (-1, 4))
    gt = np.reshape(np.asarray(gt_boxes, dtype=np.float64), (-1, 4))
    if len(anchors) == 0:
        raise ValueError("match_anchors: no anchors")
    if len(gt) == 0:
        raise ValueError("match_anchors: no ground-truth boxes")
    iou = jaccard_matrix(anchors, gt)
    best_gt = np.argmax(iou, axis=1)
    max_ov = iou[np.arange(len(anchors)), best_gt]
    labels = np.full(len(anchors), IGNORE, dtype=np.int8)
    labels[max_ov < neg_threshold] = NEGATIVE
    pos = max_ov > pos_threshold
    labels[pos] = POSITIVE
    gt_index = np.where(pos, best_gt, -1)
    claimed = np.zeros(len(anchors), dtype=bool)
    for g in range(len(gt)):
        col = np.where(claimed, -np.inf, iou[:, g])
        if not np.isfinite(col).any():
            col = iou[:, g]
        a = int(np.argmax(col))
        claimed[a] = True
        labels[a] = POSITIVE
        gt_index[a] = g
    return MatchAssignment(labels, gt_index, max_ov)


# --------------------------------------------------------------------------
# NMS


def nms(boxes, scores, iou_threshold):
    """Greedy NMS; returns kept indices by descending score (ties: lower index first)."""
    boxes = np.reshape(np.asarray(boxes, dtype=np.float64), (-1, 4))
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes vs {len(scores)} scores")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.intp)
    order = np.lexsort((np.arange(len(scores)), -scores))
    iou = jaccard_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return np.asarray(keep, dtype=np.intp)
