import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seubench.campaign import GroupStats, VulnerabilityReport, run_campaign, run_golden, summarize
from seubench.errors import ContractError
from seubench.faults import FaultPlan, FaultSpec
from seubench.graph import INPUT, LayerKind, LayerSpec, graph_from_layers
from seubench.metrics import (
    class_iou,
    global_iou,
    iou_per_class,
    msb_gap,
    range_ratio,
    range_ratio_table,
    weighted_iou,
)

PRED = np.array([[0, 0], [1, 1]])
GT = np.array([[0, 1], [1, 1]])


def test_toy_example():
    ious = iou_per_class(PRED, GT)
    assert ious[0] == 50.0
    assert ious[1] == pytest.approx(200 / 3)


def test_disjoint_and_perfect():
    a = np.zeros((3, 3), int)
    assert global_iou([a], [a + 1], 2) == 0.0
    assert global_iou([GT], [GT]) == 100.0
    assert np.all(class_iou([GT], [GT]) == 100.0)
    assert np.isnan(iou_per_class(a, a, 3)[2])


def test_global_iou_pools_pixels_over_images():
    p2, g2 = np.array([[2, 2]]), np.array([[2, 0]])
    # class 0: I=1+0, U=2+1; class 1: I=2, U=3; class 2: I=0+1, U=0+2
    assert global_iou([PRED, p2], [GT, g2]) == pytest.approx(100 * 4 / 8)
    assert class_iou([PRED, p2], [GT, g2]).tolist() == pytest.approx([100 / 3, 200 / 3, 50.0])


def test_weighted_iou_by_hand():
    pred = np.array([0, 0, 1, 1, 2, 2, 2, 0])
    gt = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    ious = np.array([2 / 4, 1 / 3, 2 / 4]) * 100
    freq = np.array([3.0, 2.0, 3.0])
    w = (1 / freq) / (1 / freq).sum()
    assert weighted_iou([pred], [gt]) == pytest.approx(float(w @ ious))
    assert weighted_iou([pred], [gt], [5, 5, 5]) == pytest.approx(ious.mean())


def test_zero_frequency_class_warns():
    with pytest.warns(UserWarning, match="zero frequency"):
        value = weighted_iou([PRED], [GT], [2, 2, 0], num_classes=3)
    assert value == pytest.approx(np.mean([50.0, 200 / 3]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_iou_properties(seed, scale):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 3, (2, 5, 5)), rng.integers(0, 3, (2, 5, 5))
    p[0, 0, :3] = g[0, 0, :3] = [0, 1, 2]
    freq = rng.uniform(1, 10, 3)
    assert weighted_iou(p, g, freq) == pytest.approx(weighted_iou(p, g, freq * scale))
    assert global_iou(p, g) == pytest.approx(global_iou(g, p))
    per = class_iou(p, g)
    assert np.nanmin(per) - 1e-9 <= global_iou(p, g) <= np.nanmax(per) + 1e-9


def test_metric_errors():
    with pytest.raises(ContractError):
        global_iou([PRED], [GT[:1]])
    with pytest.raises(ContractError):
        global_iou([PRED], [GT], 1)


def test_range_ratio_examples():
    assert range_ratio([0.5, 1.5]) == 0.5
    assert range_ratio(np.ones(10)) == 0.0
    assert range_ratio([2.0, -1.999, 1.0000001]) == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        range_ratio([])


@given(arrays(np.float32, 30, elements=st.floats(-4, 4, width=32)))
def test_range_ratio_sign_invariant(v):
    assert range_ratio(v) == range_ratio(-v)
    assert 0 <= range_ratio(v) <= 1


def test_msb_gap_arithmetic():
    stats = GroupStats(10, 5.0, 1.0, 0.8, 0.0)
    rep = VulnerabilityReport({("s", 30): stats}, {"s": stats}, stats, ["s"])
    assert msb_gap(rep, {"s": 1.0}) == {"s": -20.0}
    assert msb_gap(rep, {"s": 0.0}, metric="pixel") == {"s": 5.0}
    empty = VulnerabilityReport({("s", 29): stats}, {"s": stats}, stats, ["s"])
    with pytest.raises(ContractError):
        msb_gap(empty, {"s": 1.0})


def test_msb_gap_zero_on_constructed_model():
    """Output 1x1 conv where only weights in (1, 2) matter.

    Kernel [1.5, 0] and bias [10, 0] on positive inputs: class 0 always wins.
    Flipping bit 30 of 1.5 gives NaN, which never wins, so class 1 takes
    over: critical. Flipping bit 30 of 0 gives 2.0, and 2x < 1.5x + 10 for
    the inputs used: harmless. Bit 30 of 10.0 is already set, so its flip
    shrinks the bias to about 1e-38 and 1.5x > 0 still wins; the zero bias
    becomes 2.0, below 1.5x + 10. The MSB error rates then equal the range
    ratios exactly.
    """
    layers = [LayerSpec("head", LayerKind.OUTPUT_CONV, (INPUT,), {"filters": 2, "kernel": 1})]
    model = graph_from_layers(layers, (2, 2, 1), 2).replace(
        {"head/kernel": np.array([1.5, 0.0], np.float32).reshape(1, 1, 1, 2), "head/bias": np.array([10.0, 0.0], np.float32)}
    )
    images = [np.full((2, 2, 1), v, np.float32) for v in (0.5, 3.0)]
    golden = run_golden(model, images)
    faults = [FaultSpec(s, i, 30) for s in ("head/kernel", "head/bias") for i in (0, 1)]
    records = run_campaign(model, FaultPlan(0, model.fingerprint(), "set_bit", [], faults), golden)
    rep = summarize(records, model)
    ratios = range_ratio_table(model)
    assert ratios == {"head/kernel": 0.5, "head/bias": 0.0}
    gaps = msb_gap(rep, ratios)
    assert gaps == {"head/kernel": 0.0, "head/bias": 0.0}
