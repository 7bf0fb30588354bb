import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cosal.geometry import (IGNORE, NEGATIVE, POSITIVE, Box, decode, encode, generate_anchors, jaccard,
                            jaccard_matrix, match_anchors, nms)
import oracles

coord = st.floats(-50, 50)
extent = st.floats(0.5, 40)
boxes_st = st.tuples(coord, coord, extent, extent)


def test_jaccard_examples():
    a = Box.from_corners(0, 0, 2, 2)
    b = Box.from_corners(1, 1, 3, 3)
    assert jaccard(a, b) == pytest.approx(1 / 7, abs=1e-15)
    assert jaccard(a, a) == 1.0
    assert jaccard(a, Box.from_corners(5, 5, 6, 6)) == 0.0


@given(boxes_st, boxes_st)
def test_jaccard_properties(a, b):
    ab, ba = jaccard(a, b), jaccard(b, a)
    assert ab == ba
    assert 0.0 <= ab <= 1.0
    assert jaccard(a, a) == pytest.approx(1.0)
    assert ab == pytest.approx(oracles.iou(a, b), abs=1e-12)


def test_anchor_count_and_shapes():
    grid = generate_anchors(512, 8, (128.0, 256.0, 512.0))
    assert len(grid) == 576
    shapes = grid.anchors[:9, 2:]
    np.testing.assert_allclose(shapes[0], [128, 128])
    np.testing.assert_allclose(shapes[1], [128 / math.sqrt(2), 128 * math.sqrt(2)], rtol=1e-12)
    np.testing.assert_allclose(np.prod(shapes, axis=1), np.repeat([128.0, 256, 512], 3) ** 2, rtol=1e-12)
    # every cell's nine anchors share its centre
    np.testing.assert_array_equal(grid.anchors[:9, :2], np.full((9, 2), 32.0))
    np.testing.assert_array_equal(grid.anchors[9, :2], [96.0, 32.0])


@given(st.integers(1, 6), st.integers(1, 6))
def test_anchor_count_is_nine_per_cell(fh, fw):
    grid = generate_anchors((fh * 4, fw * 4), (fh, fw), (2.0, 4.0, 8.0))
    assert len(grid) == 9 * fh * fw


def test_anchors_may_exceed_image():
    grid = generate_anchors(64, 8, (64.0,))
    corners = oracles.corners(grid.anchors[0])
    assert corners[0] < 0


def test_non_integral_stride_rejected():
    with pytest.raises(ValueError, match="integral"):
        generate_anchors(64, 7, (16.0,))


def test_encode_examples():
    assert encode([3, 4, 5, 6], [3, 4, 5, 6]).tolist() == [0, 0, 0, 0]
    np.testing.assert_allclose(encode([12, 10, 8, 4], [10, 10, 4, 4]), [0.5, 0, math.log(2), 0], atol=1e-15)


def test_encode_decode_roundtrip_1000_pairs():
    rng = np.random.default_rng(0)
    g = np.column_stack([rng.uniform(-100, 100, (1000, 2)), rng.uniform(0.5, 200, (1000, 2))])
    d = np.column_stack([rng.uniform(-100, 100, (1000, 2)), rng.uniform(0.5, 200, (1000, 2))])
    assert np.max(np.abs(decode(encode(g, d), d) - g)) <= 1e-9
    t = rng.uniform(-2, 2, (1000, 4))
    assert np.max(np.abs(encode(decode(t, d), d) - t)) <= 1e-9


def test_match_single_gt_equal_to_anchor():
    anchors = generate_anchors(64, 4, (16.0, 32.0, 64.0)).anchors
    m = match_anchors(anchors, anchors[20:21])
    assert m.labels[20] == POSITIVE and m.gt_index[20] == 0 and m.max_overlap[20] == 1.0


def test_match_best_anchor_positive_below_threshold():
    anchors = np.array([[10, 10, 10, 10], [40, 40, 10, 10]], dtype=float)
    gt = np.array([[10, 10, 10, 10 / 0.3]])  # IoU with anchor 0 is exactly 0.3
    assert jaccard(anchors[0], gt[0]) == pytest.approx(0.3)
    m = match_anchors(anchors, gt)
    assert m.labels.tolist() == [POSITIVE, NEGATIVE]
    assert m.gt_index.tolist() == [0, -1]


def test_match_ignore_band():
    anchors = np.array([[10, 10, 10, 10], [10, 10, 10, 10 / 0.4], [40, 40, 10, 10]], dtype=float)
    m = match_anchors(anchors, anchors[:1])
    assert m.labels.tolist() == [POSITIVE, IGNORE, NEGATIVE]


def test_match_rejects_empty():
    with pytest.raises(ValueError):
        match_anchors(np.zeros((0, 4)), [[1, 1, 1, 1]])
    with pytest.raises(ValueError):
        match_anchors([[1, 1, 1, 1]], np.zeros((0, 4)))


def _random_boxes(rng, n, lo=0, hi=64):
    return np.column_stack([rng.uniform(lo, hi, n), rng.uniform(lo, hi, n), rng.uniform(2, 30, n),
                            rng.uniform(2, 30, n)])


@pytest.mark.parametrize("seed", range(50))
def test_match_equals_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    anchors = _random_boxes(rng, int(rng.integers(1, 101)))
    gt = _random_boxes(rng, int(rng.integers(1, 6)))
    labels, gidx = oracles.match(anchors.tolist(), gt.tolist())
    m = match_anchors(anchors, gt)
    assert m.labels.tolist() == labels
    assert m.gt_index.tolist() == gidx


@given(st.lists(boxes_st, min_size=1, max_size=8), st.lists(boxes_st, min_size=1, max_size=3))
def test_every_gt_gets_a_positive(anchors, gt):
    m = match_anchors(anchors, gt)
    if len(anchors) >= len(gt):
        assert set(m.gt_index[m.labels == POSITIVE].tolist()) == set(range(len(gt)))


def test_nms_examples():
    assert nms([[0, 0, 4, 4]], [0.3], 0.5).tolist() == [0]
    assert nms([[0, 0, 4, 4], [0, 0, 4, 4]], [0.8, 0.9], 0.5).tolist() == [1]
    assert nms(np.zeros((0, 4)), np.zeros(0), 0.5).tolist() == []


@pytest.mark.parametrize("seed", range(100))
def test_nms_equals_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 21))
    boxes = _random_boxes(rng, n, 0, 32)
    scores = rng.integers(0, 5, n) / 4.0  # coarse scores exercise the tie rule
    thr = float(rng.choice([0.3, 0.5, 0.7]))
    assert nms(boxes, scores, thr).tolist() == oracles.nms(boxes.tolist(), scores.tolist(), thr)


@given(st.lists(boxes_st, min_size=0, max_size=12), st.floats(0.1, 0.9), st.randoms())
def test_nms_properties(boxes, thr, rnd):
    scores = [rnd.random() for _ in boxes]
    keep = nms(np.reshape(boxes, (-1, 4)), scores, thr).tolist()
    assert len(set(keep)) == len(keep) and set(keep) <= set(range(len(boxes)))
    assert [scores[i] for i in keep] == sorted((scores[i] for i in keep), reverse=True)
    if keep:
        ov = jaccard_matrix(np.array(boxes)[keep], np.array(boxes)[keep])
        np.fill_diagonal(ov, 0)
        assert ov.max() <= thr
