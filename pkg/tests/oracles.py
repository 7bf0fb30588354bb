"""Independent reference implementations used as test oracles.

Written loop-by-loop from the definitions, without importing the package
code they check.
"""
import math
from fractions import Fraction

import numpy as np


def corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b):
    ax1, ay1, ax2, ay2 = corners(a)
    bx1, by1, bx2, by2 = corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, thr):
    """O(n^2): visit by (score desc, index asc); keep unless overlapping a kept box."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= thr for k in kept):
            kept.append(i)
    return kept


def match(anchors, gts, pos=0.5, neg=0.3):
    """Exhaustive matcher. Labels: 1 positive, 0 negative, -1 ignore."""
    n, m = len(anchors), len(gts)
    ov = [[iou(anchors[a], gts[g]) for g in range(m)] for a in range(n)]
    labels, gidx = [], []
    for a in range(n):
        best_g, best = 0, ov[a][0]
        for g in range(1, m):
            if ov[a][g] > best:
                best_g, best = g, ov[a][g]
        if best > pos:
            labels.append(1)
            gidx.append(best_g)
        elif best < neg:
            labels.append(0)
            gidx.append(-1)
        else:
            labels.append(-1)
            gidx.append(-1)
    claimed = set()
    for g in range(m):
        cands = [a for a in range(n) if a not in claimed] or list(range(n))
        best_a = cands[0]
        for a in cands[1:]:
            if ov[a][g] > ov[best_a][g]:
                best_a = a
        claimed.add(best_a)
        labels[best_a] = 1
        gidx[best_a] = g
    return labels, gidx


def bilinear(fmap, y, x):
    """Value at continuous (y, x); cell (r, c) sits at (r + .5, c + .5).

    Zero outside [0, H] x [0, W]; inside the outer half-cell the border value is held.
    """
    h, w = fmap.shape
    if y < 0 or y > h or x < 0 or x > w:
        return 0.0
    u = min(max(y - 0.5, 0.0), h - 1.0)
    v = min(max(x - 0.5, 0.0), w - 1.0)
    r0, c0 = int(math.floor(u)), int(math.floor(v))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fu, fv = u - r0, v - c0
    return ((1 - fu) * (1 - fv) * fmap[r0, c0] + (1 - fu) * fv * fmap[r0, c1]
            + fu * (1 - fv) * fmap[r1, c0] + fu * fv * fmap[r1, c1])


def roi_align(feature, box, bins_h, bins_w, samples=2, use_max=False):
    """Scalar RoIAlign of one center-form box on a (C, H, W) map."""
    x1, y1, x2, y2 = corners(box)
    bh = (y2 - y1) / bins_h
    bw = (x2 - x1) / bins_w
    out = np.zeros((feature.shape[0], bins_h, bins_w))
    for c in range(feature.shape[0]):
        for i in range(bins_h):
            for j in range(bins_w):
                vals = []
                for a in range(samples):
                    for b in range(samples):
                        y = y1 + (i + (a + 0.5) / samples) * bh
                        x = x1 + (j + (b + 0.5) / samples) * bw
                        vals.append(bilinear(feature[c], y, x))
                out[c, i, j] = max(vals) if use_max else sum(vals) / len(vals)
    return out


def confusion(p, y, t):
    tp = fp = fn = 0
    for pv, yv in zip(np.ravel(p), np.ravel(y)):
        pred = pv > t
        if pred and yv:
            tp += 1
        elif pred and not yv:
            fp += 1
        elif not pred and yv:
            fn += 1
    return tp, fp, fn


def precision_recall(p, y, t):
    tp, fp, fn = confusion(p, y, t)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def mae(p, y):
    total = Fraction(0)
    flat_p, flat_y = np.ravel(p), np.ravel(y)
    for pv, yv in zip(flat_p, flat_y):
        total += Fraction(abs(float(pv) - float(yv)))
    return float(total) / len(flat_p)


def adaptive_f(p, y, beta2=0.3):
    """Two passes: threshold from the mean, then confusion counts."""
    s = 0.0
    for v in np.ravel(p):
        s += float(v)
    t = min(1.0, 2.0 * s / np.size(p))
    prec, rec = precision_recall(p, y, t)
    den = beta2 * prec + rec
    return 0.0 if den == 0 else (1 + beta2) * prec * rec / den


def finite_difference(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g
