"""Finite-difference gradient suite over every differentiable piece.

Layers, RoIAlign, each loss, and the assembled network (composite loss) are
probed in float64 against central differences.
"""
from __future__ import annotations

import numpy as np

from .diffcore import GradCheckReport, LayerParams, grad_check, numeric_grad, rel_error
from .geometry import generate_anchors, match_anchors
from .losses import LossConfig, bce_loss_grad, rpn_loss, smooth_l1, smooth_l1_grad, weighted_triplet_loss_grad
from .roialign import RoiSpec, roi_align_many, roi_align_many_backward

LAYER_KINDS = ("conv3x3", "conv1x1", "fc", "relu", "sigmoid", "maxpool", "upsample", "concat")
LOSS_KINDS = ("bce", "smooth_l1", "rpn", "triplet")


def _away_from_zero(x, gap=0.05):
    # kinks (relu at 0) are not differentiable; keep probes clear of them
    return np.where(x >= 0, x + gap, x - gap)


def _compare(kind, probe, targets, tolerance, eps=1e-6):
    """``targets``: list of (label, tensor, analytic grad); tensors are perturbed in place."""
    report = GradCheckReport(kind, True, tolerance)
    for label, tensor, analytic in targets:
        err = rel_error(np.asarray(analytic, dtype=np.float64), numeric_grad(probe, tensor, eps))
        report.n_checked += err.size
        if not err.size:
            continue
        i = int(np.argmax(err))
        report.errors[label] = float(err.flat[i])
        if err.flat[i] > report.worst_error:
            report.worst_error = float(err.flat[i])
            report.worst_location = f"{label}{tuple(int(v) for v in np.unravel_index(i, err.shape))}"
    report.passed = bool(report.worst_error <= tolerance)
    return report


def check_layer(kind, seed, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    f64 = np.float64
    if kind == "conv3x3":
        params = LayerParams.init(kind, 2, 3, rng, f64)
        params.bias[:] = rng.standard_normal(params.bias.shape)
        inputs = [rng.standard_normal((2, 5, 4))]
    elif kind == "conv1x1":
        params = LayerParams.init(kind, 3, 2, rng, f64)
        params.bias[:] = rng.standard_normal(params.bias.shape)
        inputs = [rng.standard_normal((3, 4, 3))]
    elif kind == "fc":
        params = LayerParams.init(kind, 7, 4, rng, f64)
        params.bias[:] = rng.standard_normal(params.bias.shape)
        inputs = [rng.standard_normal(7)]
    elif kind == "relu":
        params, inputs = None, [_away_from_zero(rng.standard_normal((2, 4, 4)))]
    elif kind == "sigmoid":
        params, inputs = None, [3 * rng.standard_normal((2, 3, 3))]
    elif kind == "maxpool":
        params, inputs = None, [rng.standard_normal((2, 4, 6))]
    elif kind == "upsample":
        params, inputs = None, [rng.standard_normal((2, 3, 2))]
    elif kind == "concat":
        params, inputs = None, [rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 3, 3))]
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return grad_check(kind, params, inputs, tolerance, rng=rng)


def check_roi_align(seed, aggregation="average", tolerance=1e-4):
    rng = np.random.default_rng(seed)
    spec = RoiSpec(3, 3, 2, aggregation)
    feat = rng.standard_normal((2, 6, 6))
    k = 3
    wh = rng.uniform(1.0, 5.0, size=(k, 2))
    centre = rng.uniform(0.5, 5.5, size=(k, 2))
    boxes = np.concatenate([centre, wh], axis=1)
    out, argmax = roi_align_many(feat, boxes, spec)
    up = rng.standard_normal(out.shape)
    analytic = roi_align_many_backward(feat.shape, boxes, spec, up, argmax)

    def probe():
        return float(np.sum(up * roi_align_many(feat, boxes, spec)[0]))

    return _compare(f"roi_align[{aggregation}]", probe, [("feature", feat, analytic)], tolerance)


def check_loss(kind, seed, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    if kind == "bce":
        p = rng.uniform(0.05, 0.95, size=(6, 6))
        y = (rng.random((6, 6)) < 0.4).astype(np.float64)
        _, g = bce_loss_grad(p, y)
        return _compare("bce", lambda: bce_loss_grad(p, y)[0], [("p", p, g)], tolerance)
    if kind == "smooth_l1":
        x = rng.uniform(-3, 3, size=12)
        x = np.where(np.abs(np.abs(x) - 1) < 0.05, x * 1.2, x)
        return _compare("smooth_l1", lambda: float(np.sum(smooth_l1(x))), [("x", x, smooth_l1_grad(x))], tolerance)
    if kind == "rpn":
        grid = generate_anchors(32, 4, (8.0, 16.0, 32.0), (1.0, 2.0, 0.5))
        anchors = grid.anchors
        n_gt = int(rng.integers(1, 4))
        gt = np.column_stack([rng.uniform(6, 26, n_gt), rng.uniform(6, 26, n_gt),
                              rng.uniform(5, 14, n_gt), rng.uniform(5, 14, n_gt)])
        assignment = match_anchors(anchors, gt)
        conf = rng.uniform(0.05, 0.95, size=len(anchors))
        off = rng.normal(0, 0.7, size=(len(anchors), 4))
        cfg = LossConfig(alpha_loc=float(rng.uniform(0.5, 2.0)))
        res = rpn_loss(assignment, conf, off, gt, anchors, cfg, with_grad=True)

        def probe():
            return rpn_loss(assignment, conf, off, gt, anchors, cfg).total

        return _compare("rpn", probe, [("confidence", conf, res.conf_grad), ("offsets", off, res.offset_grad)],
                        tolerance)
    if kind == "triplet":
        t, e = 5, 4
        va, vp, vn = (rng.standard_normal((t, e)) for _ in range(3))
        w = rng.uniform(0.1, 1.0, size=t)
        margin = 1.0
        # keep every hinge clearly on one side of zero
        raw = np.sum((va - vp) ** 2, 1) - np.sum((va - vn) ** 2, 1) + margin
        vn = np.where((np.abs(raw) < 0.05)[:, None], vn * 1.5, vn)
        _, dva, dvp, dvn = weighted_triplet_loss_grad(w, va, vp, vn, margin)

        def probe():
            return weighted_triplet_loss_grad(w, va, vp, vn, margin)[0]

        return _compare("triplet", probe, [("va", va, dva), ("vp", vp, dvp), ("vn", vn, dvn)], tolerance)
    raise ValueError(f"unknown loss kind {kind!r}")


def tiny_scene(seed=0, side=16):
    """Two co-salient squares and one distractor bar on a noisy background."""
    from .data import Instance, Sample, tight_box, union_mask

    rng = np.random.default_rng(seed)
    image = rng.uniform(0.2, 0.8, size=(3, side, side))
    instances = []
    for (y0, x0), (h, w), co in (((1, 1), (5, 5), True), ((9, 9), (5, 6), True), ((1, 10), (5, 3), False)):
        m = np.zeros((side, side), dtype=bool)
        m[y0:y0 + h, x0:x0 + w] = True
        image[:, m] = rng.uniform(0, 1, size=(3, 1))
        instances.append(Instance(tight_box(m), m, co))
    return Sample(image, union_mask(instances, (side, side)), instances, f"tiny{seed}")


def check_network(seed=0, tolerance=1e-3, loss_cfg=LossConfig(), side=16):
    """Composite-loss check of a one-level float64 network against every parameter."""
    from .network import CoSaliencyNet, NetworkConfig
    from .sampling import offline_triplets

    sample = tiny_scene(seed, side)
    cfg = NetworkConfig(side=side, widths=(4,), convs_per_level=1, sensitive_channels=4, rpn_channels=4,
                        rfm_hidden=6, embed_dim=3, branch_grad_to_encoder=True)
    net = CoSaliencyNet(cfg, rng=np.random.default_rng(seed), dtype=np.float64)
    for p in net.parameters():
        p.bias[:] = np.random.default_rng(seed + 1).normal(0, 0.1, p.bias.shape)
    triplets = offline_triplets(sample, np.random.default_rng(seed))
    if len(triplets) == 0:
        raise RuntimeError("tiny scene produced no triplets")
    for p in net.parameters():
        p.zero_grad()
    net.forward_backward(sample, triplets=triplets, loss_cfg=loss_cfg, mode="offline")

    def probe():
        return net.forward_backward(sample, triplets=triplets, loss_cfg=loss_cfg, mode="offline",
                                    backward=False).total

    targets = []
    for name, p in net.params.items():
        targets.append((f"{name}.weight", p.weight, p.weight_grad.copy()))
        targets.append((f"{name}.bias", p.bias, p.bias_grad.copy()))
    return _compare("network", probe, targets, tolerance, eps=1e-5)


def run_suite(seeds=20, tolerance=1e-4, network_tolerance=1e-3):
    """Every check over ``seeds`` seeds (the network once); returns a list of reports."""
    reports = []
    for kind in LAYER_KINDS:
        reports += [check_layer(kind, s, tolerance) for s in range(seeds)]
    for agg in ("average", "max"):
        reports += [check_roi_align(s, agg, tolerance) for s in range(seeds)]
    for kind in LOSS_KINDS:
        reports += [check_loss(kind, s, tolerance) for s in range(seeds)]
    reports.append(check_network(0, network_tolerance))
    return reports


def summarize(reports):
    """Worst report per kind, in first-seen order."""
    worst = {}
    for r in reports:
        cur = worst.get(r.kind)
        if cur is None or (not r.passed and cur.passed) or r.worst_error > cur.worst_error:
            worst[r.kind] = r
    return list(worst.values())
