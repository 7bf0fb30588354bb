"""Hot numeric kernels: 3x3 im2col/col2im, 2x2 max pooling, batched RoIAlign.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version. The module-level names (``im2col3x3`` etc.) point at whichever
backend :mod:`cosal._accel` selected; the ``*_numba`` / ``*_numpy`` variants
stay importable for tests and the benchmark.

RoIAlign coordinate convention: feature cell ``(i, j)`` holds its value at the
continuous point ``(i + 0.5, j + 0.5)``. Boxes are given as corners
``(x1, y1, x2, y2)`` in that continuous frame. Sample points with a coordinate
outside ``[0, extent]`` read zero; points inside the outer half-cell clamp to
the border cell.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# im2col / col2im for 3x3, stride 1, zero pad 1


def _im2col3x3_numpy(x):
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xp[:, ky:ky + h, kx:kx + w]
    return cols.reshape(c * 9, h * w)


def _col2im3x3_numpy(cols, c, h, w):
    cols = cols.reshape(c, 9, h, w)
    xp = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[:, ky:ky + h, kx:kx + w] += cols[:, ky * 3 + kx]
    return xp[:, 1:-1, 1:-1].copy()


@njit
def _im2col3x3_numba(x):
    c, h, w = x.shape
    cols = np.zeros((c * 9, h * w), dtype=x.dtype)
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                row = ci * 9 + ky * 3 + kx
                for i in range(h):
                    si = i + ky - 1
                    if si < 0 or si >= h:
                        continue
                    for j in range(w):
                        sj = j + kx - 1
                        if sj >= 0 and sj < w:
                            cols[row, i * w + j] = x[ci, si, sj]
    return cols


@njit
def _col2im3x3_numba(cols, c, h, w):
    x = np.zeros((c, h, w), dtype=cols.dtype)
    for ci in range(c):
        for ky in range(3):
            for kx in range(3):
                row = ci * 9 + ky * 3 + kx
                for i in range(h):
                    si = i + ky - 1
                    if si < 0 or si >= h:
                        continue
                    for j in range(w):
                        sj = j + kx - 1
                        if sj >= 0 and sj < w:
                            x[ci, si, sj] += cols[row, i * w + j]
    return x


# --------------------------------------------------------------------------
# 2x2 stride-2 max pooling; argmax is the flat offset 0..3 inside each window


def _maxpool2_numpy(x):
    c, h, w = x.shape
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def _maxpool2_backward_numpy(grad, arg):
    c, oh, ow = grad.shape
    win = np.zeros((c, oh, ow, 4), dtype=grad.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(c, oh, ow, 2, 2).transpose(0, 1, 3, 2, 4)
    return win.reshape(c, oh * 2, ow * 2)


@njit
def _maxpool2_numba(x):
    c, h, w = x.shape
    oh = h // 2
    ow = w // 2
    out = np.empty((c, oh, ow), dtype=x.dtype)
    arg = np.empty((c, oh, ow), dtype=np.int8)
    for ci in range(c):
        for i in range(oh):
            for j in range(ow):
                best = x[ci, 2 * i, 2 * j]
                bk = 0
                for k in range(1, 4):
                    v = x[ci, 2 * i + k // 2, 2 * j + k % 2]
                    if v > best:
                        best = v
                        bk = k
                out[ci, i, j] = best
                arg[ci, i, j] = bk
    return out, arg


@njit
def _maxpool2_backward_numba(grad, arg):
    c, oh, ow = grad.shape
    dx = np.zeros((c, oh * 2, ow * 2), dtype=grad.dtype)
    for ci in range(c):
        for i in range(oh):
            for j in range(ow):
                k = arg[ci, i, j]
                dx[ci, 2 * i + k // 2, 2 * j + k % 2] = grad[ci, i, j]
    return dx


# --------------------------------------------------------------------------
# RoIAlign over a batch of boxes on one feature map


def _axis_samples(lo, hi, bins, sr, extent):
    """Per-axis sample geometry: lower index, upper index, frac, validity.

    ``lo``/``hi`` have shape (K,). Returns arrays shaped (K, bins, sr).
    """
    size = (hi - lo) / bins
    b = np.arange(bins)[None, :, None]
    s = np.arange(sr)[None, None, :]
    pos = lo[:, None, None] + b * size[:, None, None] + (s + 0.5) * size[:, None, None] / sr
    valid = (pos >= 0.0) & (pos <= extent)
    idx = np.clip(pos - 0.5, 0.0, extent - 1)
    i0 = np.floor(idx).astype(np.intp)
    i1 = np.minimum(i0 + 1, extent - 1)
    frac = idx - i0
    return i0, i1, frac, valid


def _roi_align_numpy(feat, boxes, bh, bw, sr, use_max):
    c, h, w = feat.shape
    k = boxes.shape[0]
    y0, y1, ly, vy = _axis_samples(boxes[:, 1], boxes[:, 3], bh, sr, h)
    x0, x1, lx, vx = _axis_samples(boxes[:, 0], boxes[:, 2], bw, sr, w)
    # broadcast to (K, bh, sr, bw, sr)
    Y0, Y1 = y0[:, :, :, None, None], y1[:, :, :, None, None]
    X0, X1 = x0[:, None, None, :, :], x1[:, None, None, :, :]
    LY, LX = ly[:, :, :, None, None], lx[:, None, None, :, :]
    valid = vy[:, :, :, None, None] & vx[:, None, None, :, :]
    # lerp form: exact on constant maps
    top = feat[:, Y0, X0] + LX * (feat[:, Y0, X1] - feat[:, Y0, X0])
    bot = feat[:, Y1, X0] + LX * (feat[:, Y1, X1] - feat[:, Y1, X0])
    vals = np.where(valid, top + LY * (bot - top), 0.0).astype(feat.dtype)
    # (C, K, bh, sr, bw, sr) -> (K, C, bh, bw, sr*sr)
    vals = vals.transpose(1, 0, 2, 4, 3, 5).reshape(k, c, bh, bw, sr * sr)
    if use_max:
        arg = np.argmax(vals, axis=-1).astype(np.int32)
        out = np.take_along_axis(vals, arg[..., None], axis=-1)[..., 0]
        return out, arg
    first = vals[..., :1]
    return (first + (vals - first).mean(axis=-1, keepdims=True))[..., 0], np.zeros((k, c, bh, bw), dtype=np.int32)


def _roi_align_backward_numpy(grad, arg, boxes, shape, sr, use_max):
    c, h, w = shape
    k, _, bh, bw = grad.shape
    y0, y1, ly, vy = _axis_samples(boxes[:, 1], boxes[:, 3], bh, sr, h)
    x0, x1, lx, vx = _axis_samples(boxes[:, 0], boxes[:, 2], bw, sr, w)
    Y0, Y1 = y0[:, :, :, None, None], y1[:, :, :, None, None]
    X0, X1 = x0[:, None, None, :, :], x1[:, None, None, :, :]
    LY, LX = ly[:, :, :, None, None], lx[:, None, None, :, :]
    valid = vy[:, :, :, None, None] & vx[:, None, None, :, :]
    hy, hx = 1.0 - LY, 1.0 - LX
    # per-sample upstream, shape (K, C, bh, sr, bw, sr)
    if use_max:
        g = np.zeros((k, c, bh, bw, sr * sr), dtype=grad.dtype)
        np.put_along_axis(g, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    else:
        g = np.repeat(grad[..., None] / (sr * sr), sr * sr, axis=-1)
    g = g.reshape(k, c, bh, bw, sr, sr).transpose(0, 1, 2, 4, 3, 5)
    g = np.where(valid[:, None], g, 0.0)
    dfeat = np.zeros((c, h * w), dtype=grad.dtype)
    for yi, xi, wt in ((Y0, X0, hy * hx), (Y0, X1, hy * LX), (Y1, X0, LY * hx), (Y1, X1, LY * LX)):
        flat = np.broadcast_to(yi * w + xi, valid.shape)
        contrib = g * wt[:, None]
        for ci in range(c):
            np.add.at(dfeat[ci], flat.ravel(), contrib[:, ci].ravel())
    return dfeat.reshape(c, h, w)


@njit
def _bilinear_setup(pos, extent):
    if pos < 0.0 or pos > extent:
        return 0, 0, 0.0, False
    idx = pos - 0.5
    if idx < 0.0:
        idx = 0.0
    if idx > extent - 1:
        idx = float(extent - 1)
    i0 = int(np.floor(idx))
    i1 = i0 + 1 if i0 + 1 < extent else extent - 1
    return i0, i1, idx - i0, True


@njit
def _roi_align_numba(feat, boxes, bh, bw, sr, use_max):
    c, h, w = feat.shape
    k = boxes.shape[0]
    out = np.zeros((k, c, bh, bw), dtype=feat.dtype)
    arg = np.zeros((k, c, bh, bw), dtype=np.int32)
    first = np.zeros(c, dtype=feat.dtype)
    inv = 1.0 / (sr * sr)
    for r in range(k):
        x1b, y1b, x2b, y2b = boxes[r, 0], boxes[r, 1], boxes[r, 2], boxes[r, 3]
        bin_h = (y2b - y1b) / bh
        bin_w = (x2b - x1b) / bw
        for ph in range(bh):
            for pw in range(bw):
                for ci in range(c):
                    out[r, ci, ph, pw] = -np.inf if use_max else 0.0
                for iy in range(sr):
                    py = y1b + ph * bin_h + (iy + 0.5) * bin_h / sr
                    ya, yb, ly, oky = _bilinear_setup(py, h)
                    for ix in range(sr):
                        px = x1b + pw * bin_w + (ix + 0.5) * bin_w / sr
                        xa, xb, lx, okx = _bilinear_setup(px, w)
                        s = iy * sr + ix
                        for ci in range(c):
                            if oky and okx:
                                top = feat[ci, ya, xa] + lx * (feat[ci, ya, xb] - feat[ci, ya, xa])
                                bot = feat[ci, yb, xa] + lx * (feat[ci, yb, xb] - feat[ci, yb, xa])
                                v = top + ly * (bot - top)
                            else:
                                v = 0.0
                            if use_max:
                                if v > out[r, ci, ph, pw]:
                                    out[r, ci, ph, pw] = v
                                    arg[r, ci, ph, pw] = s
                            elif s == 0:
                                first[ci] = v
                                out[r, ci, ph, pw] = v
                            else:
                                # mean as first + mean(v - first): exact on constants
                                out[r, ci, ph, pw] += (v - first[ci]) * inv
    return out, arg


@njit
def _roi_align_backward_numba(grad, arg, boxes, c, h, w, sr, use_max):
    k, _, bh, bw = grad.shape
    dfeat = np.zeros((c, h, w), dtype=grad.dtype)
    inv = 1.0 / (sr * sr)
    for r in range(k):
        x1b, y1b, x2b, y2b = boxes[r, 0], boxes[r, 1], boxes[r, 2], boxes[r, 3]
        bin_h = (y2b - y1b) / bh
        bin_w = (x2b - x1b) / bw
        for ph in range(bh):
            for pw in range(bw):
                for iy in range(sr):
                    py = y1b + ph * bin_h + (iy + 0.5) * bin_h / sr
                    ya, yb, ly, oky = _bilinear_setup(py, h)
                    if not oky:
                        continue
                    for ix in range(sr):
                        px = x1b + pw * bin_w + (ix + 0.5) * bin_w / sr
                        xa, xb, lx, okx = _bilinear_setup(px, w)
                        if not okx:
                            continue
                        s = iy * sr + ix
                        for ci in range(c):
                            if use_max:
                                if arg[r, ci, ph, pw] != s:
                                    continue
                                g = grad[r, ci, ph, pw]
                            else:
                                g = grad[r, ci, ph, pw] * inv
                            dfeat[ci, ya, xa] += g * (1.0 - ly) * (1.0 - lx)
                            dfeat[ci, ya, xb] += g * (1.0 - ly) * lx
                            dfeat[ci, yb, xa] += g * ly * (1.0 - lx)
                            dfeat[ci, yb, xb] += g * ly * lx
    return dfeat


# --------------------------------------------------------------------------
# public dispatch


def _roi_align_numba_entry(feat, boxes, bh, bw, sr, use_max):
    return _roi_align_numba(np.ascontiguousarray(feat), np.ascontiguousarray(boxes, dtype=np.float64),
                            bh, bw, sr, use_max)


def _roi_align_backward_numba_entry(grad, arg, boxes, shape, sr, use_max):
    c, h, w = shape
    return _roi_align_backward_numba(np.ascontiguousarray(grad), arg,
                                     np.ascontiguousarray(boxes, dtype=np.float64),
                                     c, h, w, sr, use_max)


def _im2col_numba_entry(x):
    return _im2col3x3_numba(np.ascontiguousarray(x))


def _col2im_numba_entry(cols, c, h, w):
    return _col2im3x3_numba(np.ascontiguousarray(cols), c, h, w)


def _maxpool_numba_entry(x):
    return _maxpool2_numba(np.ascontiguousarray(x))


def _maxpool_backward_numba_entry(grad, arg):
    return _maxpool2_backward_numba(np.ascontiguousarray(grad), arg)


NUMBA_KERNELS = {
    "im2col3x3": _im2col_numba_entry,
    "col2im3x3": _col2im_numba_entry,
    "maxpool2": _maxpool_numba_entry,
    "maxpool2_backward": _maxpool_backward_numba_entry,
    "roi_align": _roi_align_numba_entry,
    "roi_align_backward": _roi_align_backward_numba_entry,
}
NUMPY_KERNELS = {
    "im2col3x3": _im2col3x3_numpy,
    "col2im3x3": _col2im3x3_numpy,
    "maxpool2": _maxpool2_numpy,
    "maxpool2_backward": _maxpool2_backward_numpy,
    "roi_align": _roi_align_numpy,
    "roi_align_backward": _roi_align_backward_numpy,
}
_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col3x3 = _ACTIVE["im2col3x3"]
col2im3x3 = _ACTIVE["col2im3x3"]
maxpool2 = _ACTIVE["maxpool2"]
maxpool2_backward = _ACTIVE["maxpool2_backward"]
roi_align_batch = _ACTIVE["roi_align"]
roi_align_batch_backward = _ACTIVE["roi_align_backward"]
