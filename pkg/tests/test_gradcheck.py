import pytest

from cosal.diffcore import GradCheckReport
from cosal.gradcheck import LAYER_KINDS, LOSS_KINDS, check_layer, check_roi_align, summarize


@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients(kind, seed):
    report = check_layer(kind, seed)
    assert report.passed and report.n_checked > 0, str(report)


@pytest.mark.parametrize("agg", ("average", "max"))
@pytest.mark.parametrize("seed", range(20))
def test_roi_align_gradients(agg, seed):
    report = check_roi_align(seed, agg)
    assert report.passed, str(report)


def test_zero_tolerance_reports_failure_location():
    report = check_layer("conv3x3", 0, tolerance=0.0)
    assert not report.passed
    assert report.worst_location and report.worst_error > 0
    assert str(report).startswith("FAIL conv3x3")


def test_unknown_kind():
    with pytest.raises(ValueError):
        check_layer("softmax", 0)


def test_summarize_keeps_worst_per_kind():
    a = GradCheckReport("fc", True, 1e-4, worst_error=1e-9)
    b = GradCheckReport("fc", True, 1e-4, worst_error=1e-7)
    c = GradCheckReport("fc", False, 0.0, worst_error=1e-10)
    d = GradCheckReport("bce", True, 1e-4)
    assert summarize([a, b, d]) == [b, d]
    assert summarize([a, b, c, d])[0] is c
    assert len(LOSS_KINDS) == 4
