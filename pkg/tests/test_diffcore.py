import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cosal.diffcore import (CheckpointError, LayerParams, ShapeError, TrainingDiverged, backward, forward,
                            grad_check, load_checkpoint, save_checkpoint, sgd_step)
from oracles import finite_difference


def _params(kind, n_in, n_out, seed=0, dtype=np.float64):
    p = LayerParams.init(kind, n_in, n_out, np.random.default_rng(seed), dtype)
    p.bias[:] = np.random.default_rng(seed + 100).standard_normal(p.bias.shape)
    return p


def test_relu_forward():
    assert forward("relu", None, np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]


def test_sigmoid_at_zero():
    assert forward("sigmoid", None, np.zeros(1))[0] == 0.5


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        out = forward("sigmoid", None, np.array([-1000.0, 1000.0]))
    assert out.tolist() == [0.0, 1.0]


def test_conv3x3_ones_kernel_sums_receptive_field():
    p = LayerParams("conv3x3", np.ones((1, 1, 3, 3)), np.zeros(1))
    out = forward("conv3x3", p, np.ones((1, 4, 4)))[0]
    assert out[1:3, 1:3].tolist() == [[9, 9], [9, 9]]
    assert [out[0, 0], out[0, 3], out[3, 0], out[3, 3]] == [4, 4, 4, 4]
    assert out[0, 1] == 6


def test_conv3x3_matches_direct_convolution():
    rng = np.random.default_rng(3)
    p = _params("conv3x3", 2, 3)
    x = rng.standard_normal((2, 5, 6))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[o, i, j] = np.sum(p.weight[o] * xp[:, i:i + 3, j:j + 3]) + p.bias[o]
    np.testing.assert_allclose(forward("conv3x3", p, x), ref, rtol=1e-12, atol=1e-12)


def test_relu_backward_subgradient():
    g = backward("relu", None, [np.array([2.0, -1.0, 0.0])], np.ones(3))[0]
    assert g.tolist() == [1, 0, 0]


def test_sigmoid_backward_at_zero():
    assert backward("sigmoid", None, [np.zeros(1)], np.ones(1))[0][0] == 0.25


def test_conv3x3_backward_against_own_finite_differences():
    rng = np.random.default_rng(0)
    p = _params("conv3x3", 1, 2)
    x = rng.standard_normal((1, 4, 4))
    up = rng.standard_normal((2, 4, 4))
    p.zero_grad()
    (dx,) = backward("conv3x3", p, [x], up)

    def f():
        return float(np.sum(up * forward("conv3x3", p, x)))

    for analytic, numeric in ((dx, finite_difference(f, x)), (p.weight_grad.copy(), finite_difference(f, p.weight))):
        err = np.abs(analytic - numeric) / np.maximum(1, np.abs(numeric))
        assert err.max() <= 1e-4


def test_grad_check_fc_4_to_3_seed0():
    rng = np.random.default_rng(0)
    p = _params("fc", 4, 3, seed=0)
    report = grad_check("fc", p, [rng.standard_normal(4)], 1e-4, rng=rng)
    assert report.passed, str(report)
    assert report.n_checked == 4 + 12 + 3


def test_grad_check_conv1x1_2x2x2():
    rng = np.random.default_rng(1)
    p = _params("conv1x1", 2, 2)
    assert grad_check("conv1x1", p, [rng.standard_normal((2, 2, 2))], 1e-4, rng=rng).passed


@pytest.mark.parametrize("kind,n_in,n_out,shape", [
    ("conv3x3", 2, 3, (2, 4, 4)), ("conv1x1", 2, 2, (2, 3, 3)), ("fc", 5, 4, (5,))])
def test_zero_upstream_gives_exact_zero_grads(kind, n_in, n_out, shape):
    p = _params(kind, n_in, n_out)
    x = np.random.default_rng(2).standard_normal(shape)
    up = np.zeros(forward(kind, p, x).shape)
    p.zero_grad()
    (dx,) = backward(kind, p, [x], up)
    assert not dx.any() and not p.weight_grad.any() and not p.bias_grad.any()


def test_grad_check_report_names_worst_offender():
    # relu at its kink: analytic subgradient 0, central difference 0.5
    x = np.array([[[1.0, -2.0], [0.0, 3.0]]])
    report = grad_check("relu", None, [x], 1e-4, upstream=np.ones_like(x))
    assert not report.passed
    assert report.worst_location == "input0(0, 1, 0)"
    assert report.worst_error == pytest.approx(0.5)
    assert str(report).startswith("FAIL relu")


def test_param_grads_accumulate():
    p = _params("fc", 3, 2)
    x = np.ones(3)
    up = np.ones(2)
    p.zero_grad()
    backward("fc", p, [x], up)
    once = p.weight_grad.copy()
    backward("fc", p, [x], up)
    np.testing.assert_array_equal(p.weight_grad, 2 * once)


@pytest.mark.parametrize("kind", ["conv3x3", "conv1x1"])
def test_shape_mismatch_names_layer_and_shapes(kind):
    p = _params(kind, 2, 3)
    with pytest.raises(ShapeError, match=kind) as err:
        forward(kind, p, np.zeros((4, 5, 5)))
    assert "(4, 5, 5)" in str(err.value)


def test_backward_rejects_wrong_upstream_shape():
    with pytest.raises(ShapeError, match="upstream"):
        backward("relu", None, [np.zeros((2, 3))], np.zeros((3, 2)))


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError, match="concat"):
        forward("concat", None, np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))


@pytest.mark.parametrize("w,g,lr,decay,expected", [
    (1.0, 0.0, 0.1, 0.0, 1.0),
    (0.0, 2.0, 0.5, 0.0, -1.0),
    (1.0, 0.0, 1.0, 0.1, 0.9),
])
def test_sgd_examples(w, g, lr, decay, expected):
    p = LayerParams("fc", np.array([[w]]), np.zeros(1))
    p.weight_grad[:] = g
    sgd_step([p], lr, decay)
    assert p.weight[0, 0] == pytest.approx(expected, abs=1e-15)
    assert not p.weight_grad.any()


def test_sgd_rejects_non_finite_before_touching_anything():
    a = LayerParams("fc", np.ones((1, 1)), np.zeros(1), name="a")
    b = LayerParams("fc", np.ones((1, 1)), np.zeros(1), name="b")
    a.weight_grad[:] = 1.0
    b.bias_grad[:] = np.nan
    with pytest.raises(TrainingDiverged, match="b"):
        sgd_step([a, b], 0.1)
    assert a.weight[0, 0] == 1.0


def test_sgd_per_layer_clipping():
    big = LayerParams("fc", np.zeros((1, 2)), np.zeros(1))
    small = LayerParams("fc", np.zeros((1, 1)), np.zeros(1))
    big.weight_grad[:] = [3.0, 4.0]          # norm 5 -> rescaled to 1
    small.weight_grad[:] = 0.5               # below the cap, untouched
    norm = sgd_step([big, small], 1.0, clip_norm=1.0)
    np.testing.assert_allclose(big.weight, [[-0.6, -0.8]])
    assert small.weight[0, 0] == -0.5
    assert norm == pytest.approx(np.sqrt(25.25))


@given(arrays(np.float64, (2, 4, 6), elements=st.floats(-5, 5)), st.floats(-10, 10))
def test_maxpool_upsample_roundtrip_on_constant(_, c):
    x = np.full((2, 4, 6), c)
    pooled = forward("maxpool", None, x)
    assert pooled.shape == (2, 2, 3)
    np.testing.assert_array_equal(forward("upsample", None, pooled), x)


@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-3, 3)))
def test_forward_deterministic(x):
    p = _params("conv3x3", 3, 2)
    np.testing.assert_array_equal(forward("conv3x3", p, x), forward("conv3x3", p, x.copy()))


@given(arrays(np.float64, (2, 4, 4), elements=st.floats(-3, 3)))
def test_maxpool_is_block_max(x):
    out = forward("maxpool", None, x)
    np.testing.assert_array_equal(out, x.reshape(2, 2, 2, 2, 2).max(axis=(2, 4)))


def test_checkpoint_roundtrip(tmp_path):
    recs = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
    save_checkpoint(tmp_path / "x.csk", recs)
    back = load_checkpoint(tmp_path / "x.csk")
    assert list(back) == list(recs)
    for k in recs:
        np.testing.assert_array_equal(back[k], recs[k])


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.csk").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.csk")


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "x.csk", {"w": np.ones((4, 4), dtype=np.float32)})
    data = (tmp_path / "x.csk").read_bytes()
    (tmp_path / "y.csk").write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "y.csk")
