"""Samples, on-disk dataset layout, synthetic scenes and augmentation.

Layout::

    root/images/<id>.png          RGB, 8 bit
    root/annotations/<id>.json    {id, width, height, instances: [{box, mask, cosalient}]}
    root/masks/<id>_<k>.png       1-bit instance masks
    root/gt/<id>.png              optional cached co-saliency mask (0/255)

Boxes are ``[cx, cy, w, h]`` in pixels. Pixel ``(i, j)`` covers the square
``[j, j+1] x [i, i+1]``, so a tight box around a mask has integer corners.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


@dataclass
class Instance:
    box: np.ndarray   # (4,) cx, cy, w, h
    mask: np.ndarray  # (S, S) bool
    cosalient: bool = True


@dataclass
class Sample:
    image: np.ndarray                  # (3, S, S) float32 in [0, 1]
    y: np.ndarray                      # (S, S) bool co-saliency mask
    instances: list = field(default_factory=list)
    id: str = ""

    @property
    def side(self):
        return self.image.shape[-1]

    def cosalient_boxes(self):
        return np.array([i.box for i in self.instances if i.cosalient], dtype=np.float64).reshape(-1, 4)

    def distractor_boxes(self):
        return np.array([i.box for i in self.instances if not i.cosalient], dtype=np.float64).reshape(-1, 4)

    @property
    def n_cosalient(self):
        return sum(1 for i in self.instances if i.cosalient)


def union_mask(instances, shape):
    y = np.zeros(shape, dtype=bool)
    for inst in instances:
        if inst.cosalient:
            y |= inst.mask
    return y


def tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    x1, x2 = cols[0], cols[-1] + 1
    y1, y2 = rows[0], rows[-1] + 1
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dtype=np.float64)


def validate_sample(sample, min_cosalient=2):
    """Return ``[(rule, message), ...]`` for every violated invariant."""
    errs = []
    img = sample.image
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != img.shape[2]:
        return [("image_shape", f"image shape {img.shape} is not (3, S, S)")]
    if img.min() < 0 or img.max() > 1:
        errs.append(("image_range", "image values outside [0, 1]"))
    shape = img.shape[1:]
    if sample.y.shape != shape:
        errs.append(("mask_shape", f"co-saliency mask {sample.y.shape} vs image {shape}"))
        return errs
    for k, inst in enumerate(sample.instances):
        if inst.mask.shape != shape:
            errs.append(("mask_shape", f"instance {k} mask {inst.mask.shape} vs image {shape}"))
            continue
        cx, cy, w, h = inst.box
        if w <= 0 or h <= 0:
            errs.append(("box_positive", f"instance {k} box has non-positive extent"))
            continue
        rows, cols = np.nonzero(inst.mask)
        if len(rows) == 0:
            errs.append(("mask_empty", f"instance {k} mask is empty"))
            continue
        tol = 1e-6
        if (cols.min() < cx - w / 2 - tol or cols.max() + 1 > cx + w / 2 + tol
                or rows.min() < cy - h / 2 - tol or rows.max() + 1 > cy + h / 2 + tol):
            errs.append(("mask_in_box", f"instance {k} mask extends outside its box"))
    if not np.array_equal(sample.y, union_mask(sample.instances, shape)):
        errs.append(("y_is_union", "co-saliency mask differs from the union of co-salient instance masks"))
    if sample.n_cosalient < min_cosalient:
        errs.append(("min_cosalient", f"{sample.n_cosalient} co-salient instances, need >= {min_cosalient}"))
    return errs


# --------------------------------------------------------------------------
# disk I/O


class Dataset(list):
    """List of samples with the loader's diagnostics attached."""

    def __init__(self, samples=(), diagnostics=()):
        super().__init__(samples)
        self.diagnostics = list(diagnostics)


def _to_u8(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_sample(sample, root, write_gt=True):
    root = Path(root)
    for sub in ("images", "annotations", "masks", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    sid = sample.id
    Image.fromarray(_to_u8(sample.image).transpose(1, 2, 0), mode="RGB").save(root / "images" / f"{sid}.png")
    entries = []
    for k, inst in enumerate(sample.instances):
        rel = f"masks/{sid}_{k}.png"
        # 1-bit PNG; building it from an 8-bit image sidesteps Pillow's bool packing
        bits = Image.fromarray(inst.mask.astype(np.uint8) * 255, mode="L").convert("1", dither=Image.Dither.NONE)
        bits.save(root / rel)
        entries.append({"box": [float(v) for v in inst.box], "mask": rel, "cosalient": bool(inst.cosalient)})
    ann = {"id": sid, "width": sample.side, "height": sample.side, "instances": entries}
    (root / "annotations" / f"{sid}.json").write_text(json.dumps(ann, indent=1))
    if write_gt:
        Image.fromarray(sample.y.astype(np.uint8) * 255, mode="L").save(root / "gt" / f"{sid}.png")


def save_dataset(samples, root):
    for s in samples:
        save_sample(s, root)


def load_image(path):
    """RGB PNG -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def load_sample(root, sid):
    """Load one sample; raises ``ValueError('<rule>: <message>')`` on any violation."""
    root = Path(root)
    ann_path = root / "annotations" / f"{sid}.json"
    try:
        ann = json.loads(ann_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"annotation: {ann_path}: {exc}") from None
    img_path = root / "images" / f"{sid}.png"
    if not img_path.exists():
        raise ValueError(f"missing_file: {img_path}")
    image = load_image(img_path)
    if image.shape[1:] != (ann.get("height"), ann.get("width")):
        raise ValueError(f"image_shape: {img_path} is {image.shape[1:]}, annotation says "
                         f"{(ann.get('height'), ann.get('width'))}")
    instances = []
    for k, entry in enumerate(ann.get("instances", [])):
        mpath = root / entry["mask"]
        if not mpath.exists():
            raise ValueError(f"missing_file: {mpath}")
        instances.append(Instance(np.asarray(entry["box"], dtype=np.float64), load_mask(mpath),
                                  bool(entry.get("cosalient", True))))
    y = union_mask(instances, image.shape[1:])
    gt_path = root / "gt" / f"{sid}.png"
    if gt_path.exists():
        cached = load_mask(gt_path)
        if not np.array_equal(cached, y):
            raise ValueError(f"y_is_union: {gt_path} disagrees with the union of co-salient masks")
    sample = Sample(image, y, instances, str(ann.get("id", sid)))
    errs = validate_sample(sample)
    if errs:
        rule, msg = errs[0]
        raise ValueError(f"{rule}: {ann_path}: {msg}")
    return sample


def load_dataset(root):
    """Load every annotated sample under ``root``; invalid samples are skipped
    and reported in ``.diagnostics`` as ``(path, message)``."""
    root = Path(root)
    ann_dir = root / "annotations"
    ds = Dataset()
    if not ann_dir.is_dir():
        return ds
    for ann_path in sorted(ann_dir.glob("*.json")):
        try:
            ds.append(load_sample(root, ann_path.stem))
        except ValueError as exc:
            log.warning("rejected %s: %s", ann_path, exc)
            ds.diagnostics.append((str(ann_path), str(exc)))
    return ds


# --------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")


def shape_mask(kind, u, v):
    """Membership of unit-box coordinates ``u, v`` in [-1, 1] for a shape class."""
    if kind == "circle":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if kind == "triangle":
        return (v <= 0.85) & (v >= 2.0 * np.abs(u) - 0.95)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "cross":
        return ((np.abs(u) <= 0.33) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.33) & (np.abs(u) <= 1.0))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    raise ValueError(f"unknown shape {kind!r}")


@dataclass
class SynthConfig:
    min_instances: int = 2
    max_instances: int = 4
    max_distractors: int = 2
    size_frac: tuple = (0.22, 0.34)   # base object side as a fraction of the image side
    size_jitter: float = 0.2
    gap: int = 2
    texture: float = 0.12
    noise: float = 0.03
    place_attempts: int = 200


def _texture(rng, side, cfg):
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.standard_normal((3, 5, 5))
    up = np.asarray([np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((side, side), Image.BILINEAR))
                     for c in coarse])
    img = base[:, None, None] + cfg.texture * up / max(1e-6, np.abs(up).max())
    img += cfg.noise * rng.standard_normal((3, side, side))
    return img


def _distinct_color(rng, avoid, min_dist=0.45):
    for _ in range(100):
        c = rng.uniform(0, 1, size=3)
        if np.ptp(c) > 0.35 and all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c
    return c


def _rasterize(kind, side, cx, cy, size):
    coords = np.arange(side) + 0.5
    u = (coords[None, :] - cx) / (size / 2)
    v = (coords[:, None] - cy) / (size / 2)
    return shape_mask(kind, u, v)


def _place(rng, side, size, taken, gap, attempts):
    half = size / 2
    for _ in range(attempts):
        cx = rng.uniform(half + 1, side - half - 1)
        cy = rng.uniform(half + 1, side - half - 1)
        box = (cx - half - gap, cy - half - gap, cx + half + gap, cy + half + gap)
        if all(box[2] <= t[0] or t[2] <= box[0] or box[3] <= t[1] or t[3] <= box[1] for t in taken):
            taken.append((cx - half, cy - half, cx + half, cy + half))
            return cx, cy
    return None


def synth_sample(rng, side=64, cfg=SynthConfig(), sid=""):
    """One scene: 2-4 copies of a shape class plus 0-2 single distractors."""
    if side < 32:
        raise ValueError("synthetic side must be >= 32")
    while True:
        img = _texture(rng, side, cfg)
        bg = img.mean(axis=(1, 2))
        kinds = rng.permutation(len(SHAPES))
        co_kind = SHAPES[kinds[0]]
        co_color = _distinct_color(rng, [bg])
        base = rng.uniform(*cfg.size_frac) * side
        n_co = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        n_dis = int(rng.integers(0, cfg.max_distractors + 1))
        taken, instances = [], []
        plan = [(co_kind, co_color, True)] * n_co
        used_colors = [bg, co_color]
        for d in range(n_dis):
            kind = SHAPES[kinds[1 + d % (len(SHAPES) - 1)]]
            color = _distinct_color(rng, used_colors)
            used_colors.append(color)
            plan.append((kind, color, False))
        for kind, color, co in plan:
            if co:
                size = base * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter)
            else:
                size = rng.uniform(*cfg.size_frac) * side
            spot = _place(rng, side, size, taken, cfg.gap, cfg.place_attempts)
            if spot is None:
                continue
            mask = _rasterize(kind, side, spot[0], spot[1], size)
            if mask.sum() == 0:
                continue
            shade = color[:, None] * (1 + 0.5 * cfg.noise * rng.standard_normal((3, int(mask.sum()))))
            img[:, mask] = shade
            instances.append(Instance(tight_box(mask), mask, co))
        if sum(i.cosalient for i in instances) >= cfg.min_instances:
            break
    img = _to_u8(img).astype(np.float32) / 255.0
    return Sample(img, union_mask(instances, (side, side)), instances, sid)


def synth_generate(count, side=64, seed=0, cfg=SynthConfig(), start=0):
    """``count`` scenes; scene ``i`` uses its own generator seeded by ``(seed, i)``."""
    return [synth_sample(np.random.default_rng([seed, start + i]), side, cfg, sid=f"{start + i:05d}")
            for i in range(count)]


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    p: float = 0.5
    scale_range: tuple = (0.75, 1.25)
    max_crop_frac: float = 0.25
    max_occlusion_frac: float = 0.15
    min_visible: float = 0.25


def rescale_box(box, s):
    """Box under the map ``x -> s * x`` (before any re-crop)."""
    cx, cy, w, h = box
    return np.array([cx * s, cy * s, w * s, h * s], dtype=np.float64)


def _background_fill(rng, image, fg, n):
    """``n`` pixels drawn from the sample's own background."""
    flat = image.reshape(3, -1)
    pool = np.flatnonzero(~fg.reshape(-1))
    if len(pool) == 0:
        pool = np.arange(flat.shape[1])
    return flat[:, rng.choice(pool, size=n)]


def _resize(arr, n, resample):
    return np.asarray(Image.fromarray(arr).resize((n, n), resample))


def augment(sample, rng, cfg=AugmentConfig()):
    """Multi-scale scaling, border clipping and occlusion, each with probability ``p``.

    Returns the input object unchanged when no op fires or when fewer than two
    co-salient instances would survive.
    """
    ops = rng.random(3) < cfg.p
    if not ops.any():
        return sample
    side = sample.side
    img = _to_u8(sample.image).transpose(1, 2, 0)
    masks = [inst.mask.copy() for inst in sample.instances]
    ref_area = np.array([m.sum() for m in masks], dtype=np.float64)
    fg = np.zeros((side, side), dtype=bool)
    for m in masks:
        fg |= m
    src_img = sample.image

    if ops[0]:
        s = rng.uniform(*cfg.scale_range)
        n = max(1, int(round(side * s)))
        big = _resize(img, n, Image.BILINEAR)
        bigm = [_resize(m.astype(np.uint8) * 255, n, Image.NEAREST) >= 128 for m in masks]
        out = np.empty_like(img)
        outm = [np.zeros((side, side), dtype=bool) for _ in masks]
        if n >= side:
            o = (n - side) // 2
            out[:] = big[o:o + side, o:o + side]
            for dst, m in zip(outm, bigm):
                dst[:] = m[o:o + side, o:o + side]
        else:
            o = (side - n) // 2
            fill = _background_fill(rng, src_img, fg, side * side)
            out[:] = _to_u8(fill).T.reshape(side, side, 3)
            out[o:o + n, o:o + n] = big
            for dst, m in zip(outm, bigm):
                dst[o:o + n, o:o + n] = m
        img, masks = out, outm
        ref_area *= (n / side) ** 2

    def blank(y0, y1, x0, x1):
        h, w = y1 - y0, x1 - x0
        if h <= 0 or w <= 0:
            return
        fill = _background_fill(rng, src_img, fg, h * w)
        img[y0:y1, x0:x1] = _to_u8(fill).T.reshape(h, w, 3)
        for m in masks:
            m[y0:y1, x0:x1] = False

    if ops[1]:
        k = int(rng.integers(1, int(cfg.max_crop_frac * side) + 1))
        edge = int(rng.integers(4))
        if edge == 0:
            blank(0, k, 0, side)
        elif edge == 1:
            blank(side - k, side, 0, side)
        elif edge == 2:
            blank(0, side, 0, k)
        else:
            blank(0, side, side - k, side)

    if ops[2]:
        area = rng.uniform(0.02, cfg.max_occlusion_frac) * side * side
        r = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        h = int(min(side, max(1, round(np.sqrt(area * r)))))
        w = int(min(side, max(1, round(area / max(h, 1)))))
        y0 = int(rng.integers(0, side - h + 1))
        x0 = int(rng.integers(0, side - w + 1))
        blank(y0, y0 + h, x0, x0 + w)

    instances = []
    for inst, m, ref in zip(sample.instances, masks, ref_area):
        if ref <= 0 or m.sum() < cfg.min_visible * ref:
            continue
        instances.append(Instance(tight_box(m), m, inst.cosalient))
    if sum(i.cosalient for i in instances) < 2:
        return sample
    image = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    return Sample(image, union_mask(instances, (side, side)), instances, sample.id)
