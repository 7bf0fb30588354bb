"""Encoder / Feature-Sensitive block / decoder backbone with RPN and RFM branches.

Topology (``levels`` = L, widths ``w0..w{L-1}``)::

    image -> [conv3x3+relu]*k at each level, keep as skip, maxpool   (encoder -> H)
    H -> 3 x (conv3x3 + relu)                                         (sensitive -> R)
    R -> for each level, deepest first: upsample, concat skip,
         [conv3x3+relu]*k                                             (decoder)
      -> conv1x1 -> sigmoid                                           (P)

    R -> conv3x3+relu -> conv1x1 (9 conf) / conv1x1 (36 offsets)      (RPN)
    R, box -> RoIAlign -> fc -> relu -> fc                            (RFM embedding)

Only the backbone and sensitive block run at inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import diffcore
from .diffcore import LayerParams, forward
from .geometry import (DEFAULT_RATIOS, DEFAULT_SCALE_FRACTIONS, decode, generate_anchors,
                       match_anchors, scales_from_fractions)
from .losses import (LossConfig, bce_loss_grad, per_anchor_rpn_loss, rpn_loss, total_loss,
                     weighted_triplet_loss_grad)
from .roialign import RoiSpec, roi_align_many, roi_align_many_backward
from .sampling import SamplingConfig, offline_triplets, online_triplets

OFFSET_CLAMP = 4.0  # |tw|, |th| bound when decoding proposals


@dataclass
class NetworkConfig:
    side: int = 64
    widths: tuple = (8, 16, 32)
    convs_per_level: int = 2
    sensitive_channels: int = 32
    rpn_channels: int = 32
    rfm_hidden: int = 64
    embed_dim: int = 32
    anchor_scale_fractions: tuple = DEFAULT_SCALE_FRACTIONS
    anchor_ratios: tuple = DEFAULT_RATIOS
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    init: str = "he"
    rpn_prior: float = 0.01  # initial confidence; keeps the all-negative sum from swamping the start
    head_std: float = 0.0    # >0: rpn_cls/rpn_reg weights drawn from N(0, head_std) instead of the init scheme
    # False: RPN/RFM gradients update the sensitive block and heads but stop at H,
    # so the encoder learns from the decoder loss only (stand-in for a frozen encoder).
    branch_grad_to_encoder: bool = False
    roi: RoiSpec = field(default_factory=RoiSpec)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) <= 0 or self.sensitive_channels <= 0:
            raise ValueError("channel widths must be positive")
        if self.embed_dim < 2:
            raise ValueError("embedding length must be >= 2")
        if self.side % (2 ** self.levels):
            raise ValueError(f"side {self.side} not divisible by 2**{self.levels}")

    @property
    def levels(self):
        return len(self.widths)

    @property
    def feature_side(self):
        return self.side // 2 ** self.levels


class LossBreakdown(NamedTuple):
    total: float
    decoder: float
    rpn: float
    rfm: float
    n_triplets: int = 0


BACKBONE_PREFIXES = ("enc", "sens", "dec", "out")
BRANCH_PREFIXES = ("rpn", "rfm")


class Tape:
    """Records layer applications so gradients can be pushed back in reverse."""

    def __init__(self):
        self.values = []
        self.ops = []  # (backward_fn, input ids, output id)

    def input(self, x):
        self.values.append(x)
        return len(self.values) - 1

    def __getitem__(self, i):
        return self.values[i]

    def layer(self, kind, params, *ids):
        xs = [self.values[i] for i in ids]
        out = forward(kind, params, *xs)
        self.values.append(out)
        self.ops.append((lambda g, xs=xs: diffcore.backward(kind, params, xs, g), ids, len(self.values) - 1))
        return len(self.values) - 1

    def custom(self, out, ids, backward_fn):
        self.values.append(out)
        self.ops.append((backward_fn, ids, len(self.values) - 1))
        return len(self.values) - 1

    def backward(self, seeds):
        grads = dict(seeds)
        for fn, ids, out in reversed(self.ops):
            g = grads.pop(out, None)
            if g is None:
                continue
            for i, gi in zip(ids, fn(g)):
                grads[i] = grads[i] + gi if i in grads else gi
        return grads


class CoSaliencyNet:
    def __init__(self, config=None, rng=None, dtype=np.float32, params=None):
        self.config = config or NetworkConfig()
        self.dtype = dtype
        cfg = self.config
        self.anchor_grid = generate_anchors(cfg.side, cfg.feature_side,
                                            scales_from_fractions(cfg.side, cfg.anchor_scale_fractions),
                                            cfg.anchor_ratios)
        self.params = params if params is not None else self._init_params(
            rng if rng is not None else np.random.default_rng(0))

    # ------------------------------------------------------------------ params

    def _layout(self):
        """(name, kind, n_in, n_out) for every parameterised layer, in order."""
        cfg = self.config
        out = []
        c = 3
        for l, w in enumerate(cfg.widths):
            for k in range(cfg.convs_per_level):
                out.append((f"enc{l}_{k}", "conv3x3", c, w))
                c = w
        sc = cfg.sensitive_channels
        for k in range(3):
            out.append((f"sens{k}", "conv3x3", c, sc))
            c = sc
        for l in reversed(range(cfg.levels)):
            w = cfg.widths[l]
            c = c + w
            for k in range(cfg.convs_per_level):
                out.append((f"dec{l}_{k}", "conv3x3", c, w))
                c = w
        out.append(("out", "conv1x1", c, 1))
        out.append(("rpn_conv", "conv3x3", sc, cfg.rpn_channels))
        n_anchor = len(cfg.anchor_scale_fractions) * len(cfg.anchor_ratios)
        out.append(("rpn_cls", "conv1x1", cfg.rpn_channels, n_anchor))
        out.append(("rpn_reg", "conv1x1", cfg.rpn_channels, 4 * n_anchor))
        out.append(("rfm_fc1", "fc", sc * cfg.roi.bins_h * cfg.roi.bins_w, cfg.rfm_hidden))
        out.append(("rfm_fc2", "fc", cfg.rfm_hidden, cfg.embed_dim))
        return out

    def _init_params(self, rng):
        params = {name: LayerParams.init(kind, n_in, n_out, rng, self.dtype, name=name, scheme=self.config.init)
                  for name, kind, n_in, n_out in self._layout()}
        prior = self.config.rpn_prior
        params["rpn_cls"].bias[:] = np.log(prior / (1 - prior))
        if self.config.head_std > 0:
            for name in ("rpn_cls", "rpn_reg"):
                w = params[name].weight
                w[...] = (self.config.head_std * rng.standard_normal(w.shape)).astype(w.dtype)
        return params

    def parameters(self, prefixes=None):
        for name, p in self.params.items():
            if prefixes is None or name.startswith(prefixes):
                yield p

    def state_dict(self):
        out = {}
        for name, p in self.params.items():
            out[f"{name}.weight"] = p.weight
            out[f"{name}.bias"] = p.bias
        return out

    def load_state_dict(self, records, strict_branches=False):
        """Load weights; branch layers may be absent unless ``strict_branches``."""
        layout = {name: kind for name, kind, _, _ in self._layout()}
        params = {}
        for name, kind in layout.items():
            wk, bk = f"{name}.weight", f"{name}.bias"
            if wk not in records or bk not in records:
                if name.startswith(BRANCH_PREFIXES) and not strict_branches:
                    continue
                raise diffcore.CheckpointError(f"checkpoint lacks layer {name!r}")
            ref = self.params.get(name)
            w = np.asarray(records[wk], dtype=self.dtype)
            b = np.asarray(records[bk], dtype=self.dtype)
            if ref is not None and (w.shape != ref.weight.shape or b.shape != ref.bias.shape):
                raise diffcore.CheckpointError(
                    f"layer {name!r}: checkpoint shapes {w.shape}/{b.shape} vs network "
                    f"{ref.weight.shape}/{ref.bias.shape}")
            params[name] = LayerParams(kind, w.copy(), b.copy(), name=name)
        self.params = params

    def save(self, path, extra=None):
        records = dict(self.state_dict())
        if extra:
            records.update(extra)
        diffcore.save_checkpoint(path, records)

    @classmethod
    def load(cls, path, config=None):
        records = diffcore.load_checkpoint(path)
        net = cls(config, rng=np.random.default_rng(0))
        net.load_state_dict(records)
        return net, records

    # ------------------------------------------------------------------ forward

    def _check_image(self, image):
        s = self.config.side
        if image.shape != (3, s, s):
            raise diffcore.ShapeError(f"network: image shape {image.shape} != (3, {s}, {s})")

    def _backbone(self, tape, image):
        cfg = self.config
        p = self.params
        x = tape.input(np.asarray(image, dtype=self.dtype))
        skips = []
        for l in range(cfg.levels):
            for k in range(cfg.convs_per_level):
                x = tape.layer("relu", None, tape.layer("conv3x3", p[f"enc{l}_{k}"], x))
            skips.append(x)
            x = tape.layer("maxpool", None, x)
        h = x
        r = x = self._sensitive(tape, h)
        for l in reversed(range(cfg.levels)):
            x = tape.layer("concat", None, tape.layer("upsample", None, x), skips[l])
            for k in range(cfg.convs_per_level):
                x = tape.layer("relu", None, tape.layer("conv3x3", p[f"dec{l}_{k}"], x))
        logit = tape.layer("conv1x1", p["out"], x)
        prob = tape.layer("sigmoid", None, logit)
        return {"H": h, "R": r, "P": prob, "skips": skips}

    def _sensitive(self, tape, x):
        for k in range(3):
            x = tape.layer("relu", None, tape.layer("conv3x3", self.params[f"sens{k}"], x))
        return x

    def forward_backbone(self, image):
        """``(H, R, P, skips)`` with P of shape (S, S)."""
        self._check_image(image)
        tape = Tape()
        ids = self._backbone(tape, image)
        return tape[ids["H"]], tape[ids["R"]], tape[ids["P"]][0], [tape[i] for i in ids["skips"]]

    def predict(self, image):
        """Saliency map only; touches backbone parameters exclusively."""
        return self.forward_backbone(image)[2]

    def _rpn(self, tape, r_id):
        p = self.params
        hid = tape.layer("relu", None, tape.layer("conv3x3", p["rpn_conv"], r_id))
        conf = tape.layer("sigmoid", None, tape.layer("conv1x1", p["rpn_cls"], hid))
        reg = tape.layer("conv1x1", p["rpn_reg"], hid)
        return conf, reg

    @staticmethod
    def _flatten_rpn(conf_map, reg_map):
        n, fh, fw = conf_map.shape
        conf = conf_map.transpose(1, 2, 0).reshape(-1)
        offsets = reg_map.reshape(n, 4, fh, fw).transpose(2, 3, 0, 1).reshape(-1, 4)
        return conf, offsets

    @staticmethod
    def _unflatten_rpn(dconf, doff, n, fh, fw):
        dconf_map = dconf.reshape(fh, fw, n).transpose(2, 0, 1)
        dreg_map = doff.reshape(fh, fw, n, 4).transpose(2, 3, 0, 1).reshape(4 * n, fh, fw)
        return np.ascontiguousarray(dconf_map), np.ascontiguousarray(dreg_map)

    def forward_rpn(self, r):
        """Per-anchor confidences (A,) and offsets (A, 4) for sensitive features ``r``."""
        tape = Tape()
        conf, reg = self._rpn(tape, tape.input(r))
        return self._flatten_rpn(tape[conf], tape[reg])

    def feature_boxes(self, boxes):
        scale = self.config.feature_side / self.config.side
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * scale

    def _rfm(self, tape, r_id, boxes):
        p = self.params
        spec = self.config.roi
        fboxes = self.feature_boxes(boxes)
        r = tape[r_id]
        pooled, argmax = roi_align_many(r, fboxes, spec)
        k = len(fboxes)
        flat = pooled.reshape(k, -1).astype(self.dtype, copy=False)

        def back(g):
            up = g.reshape(pooled.shape)
            return (roi_align_many_backward(r.shape, fboxes, spec, up, argmax).astype(self.dtype, copy=False),)

        x = tape.custom(flat, (r_id,), back)
        x = tape.layer("relu", None, tape.layer("fc", p["rfm_fc1"], x))
        return tape.layer("fc", p["rfm_fc2"], x)

    def forward_rfm(self, r, box):
        """Embedding of one image-coordinate box over sensitive features ``r``."""
        tape = Tape()
        return tape[self._rfm(tape, tape.input(r), [box])][0]

    def embed_regions(self, image, boxes):
        """Embeddings (K, E) of image-coordinate boxes, running the backbone once."""
        self._check_image(image)
        tape = Tape()
        ids = self._backbone(tape, image)
        return tape[self._rfm(tape, ids["R"], boxes)]

    def proposals(self, conf, offsets):
        t = np.asarray(offsets, dtype=np.float64).copy()
        t[:, 2:] = np.clip(t[:, 2:], -OFFSET_CLAMP, OFFSET_CLAMP)
        return decode(t, self.anchor_grid.anchors)

    # ------------------------------------------------------------------ training

    def forward_backward(self, sample, rng=None, mode="online", loss_cfg=LossConfig(),
                         sampling_cfg=SamplingConfig(), triplets=None, backward=True, stats=None):
        """Composite loss for one sample; accumulates parameter gradients when ``backward``.

        ``triplets`` overrides sampling (used by gradient checks). ``stats``, if
        given, is a dict whose ``no_triplet_steps`` counter is bumped when the
        RFM term has no triplets.
        """
        self._check_image(sample.image)
        rng = rng if rng is not None else np.random.default_rng(0)
        tape = Tape()
        ids = self._backbone(tape, sample.image)
        p_map = tape[ids["P"]]
        dec, dp = bce_loss_grad(p_map[0], sample.y.astype(p_map.dtype), loss_cfg.bce_eps)
        seeds = {ids["P"]: (loss_cfg.alpha * dp)[None].astype(self.dtype, copy=False)}
        gt = sample.cosalient_boxes()

        rpn_val, rfm_val, n_trip = 0.0, 0.0, 0
        use_rfm = loss_cfg.gamma > 0
        need_rpn = loss_cfg.beta > 0 or (use_rfm and mode == "online" and triplets is None)
        conf = offsets = assignment = None
        r_branch = ids["R"]
        if (need_rpn or use_rfm) and not self.config.branch_grad_to_encoder:
            # same values as R; its gradient reaches the sensitive weights but not H
            r_branch = self._sensitive(tape, tape.input(tape[ids["H"]]))
        if need_rpn:
            conf_id, reg_id = self._rpn(tape, r_branch)
            conf, offsets = self._flatten_rpn(tape[conf_id], tape[reg_id])
            anchors = self.anchor_grid.anchors
            assignment = match_anchors(anchors, gt, self.config.rpn_pos_iou, self.config.rpn_neg_iou)
            rl = rpn_loss(assignment, conf, offsets, gt, anchors, loss_cfg, with_grad=True)
            rpn_val = rl.total
            if loss_cfg.beta > 0:
                n = self.anchor_grid.per_cell
                fh, fw = self.anchor_grid.feature_h, self.anchor_grid.feature_w
                dcm, drm = self._unflatten_rpn(loss_cfg.beta * rl.conf_grad, loss_cfg.beta * rl.offset_grad, n, fh, fw)
                seeds[conf_id] = dcm.astype(self.dtype)
                seeds[reg_id] = drm.astype(self.dtype)

        if use_rfm:
            if triplets is None:
                if mode == "offline":
                    triplets = offline_triplets(sample, rng, sampling_cfg)
                elif mode == "online":
                    hardness = per_anchor_rpn_loss(assignment, conf, offsets, gt, self.anchor_grid.anchors, loss_cfg)
                    triplets = online_triplets(sample, self.proposals(conf, offsets), hardness, rng, sampling_cfg)
                else:
                    raise ValueError(f"unknown sampling mode {mode!r}")
            n_trip = len(triplets)
            if n_trip:
                emb_id = self._rfm(tape, r_branch, triplets.regions)
                emb = tape[emb_id]
                idx = triplets.index
                rfm_val, dva, dvp, dvn = weighted_triplet_loss_grad(
                    triplets.weights, emb[idx[:, 0]], emb[idx[:, 1]], emb[idx[:, 2]], loss_cfg.margin)
                demb = np.zeros_like(emb)
                np.add.at(demb, idx[:, 0], dva)
                np.add.at(demb, idx[:, 1], dvp)
                np.add.at(demb, idx[:, 2], dvn)
                seeds[emb_id] = (loss_cfg.gamma * demb).astype(self.dtype)
            elif stats is not None:
                stats["no_triplet_steps"] = stats.get("no_triplet_steps", 0) + 1

        total = total_loss(dec, rpn_val, rfm_val, loss_cfg)
        if backward:
            tape.backward(seeds)
        return LossBreakdown(float(total), float(dec), float(rpn_val), float(rfm_val), n_trip)

    def train_step(self, sample, rng, lr, weight_decay=0.0, mode="online", loss_cfg=LossConfig(),
                   sampling_cfg=SamplingConfig(), stats=None, clip_norm=0.0):
        for p in self.parameters():
            p.zero_grad()
        out = self.forward_backward(sample, rng, mode, loss_cfg, sampling_cfg, stats=stats)
        diffcore.sgd_step(self.parameters(), lr, weight_decay, clip_norm)
        return out
