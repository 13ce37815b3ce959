import math

import numpy as np
import pytest
from conftest import tiny_model
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from seubench.errors import ContractError
from seubench.faults import (
    Domain,
    FaultPlan,
    FaultSpec,
    apply_fault,
    f32_bits,
    faulted_copy,
    flip_bit_f32,
    flip_bit_int,
    gen_fault_plan,
    undo_fault,
)
from seubench.graph import LayerKind, LayerSpec, graph_from_layers


def test_f32_examples():
    assert flip_bit_f32(1.0, 30) == np.inf
    assert flip_bit_f32(-1.0, 30) == -np.inf
    assert math.isnan(flip_bit_f32(1.5, 30))
    assert flip_bit_f32(1.0, 31) == -1.0
    assert flip_bit_f32(0.0, 30) == 2.0
    with pytest.raises(ContractError):
        flip_bit_f32(1.0, 32)


def test_int_examples():
    assert flip_bit_int(1, 7, 8) == -127
    assert flip_bit_int(0, 0, 8) == 1
    assert flip_bit_int(-1, 31, 32) == 2**31 - 1
    with pytest.raises(ContractError):
        flip_bit_int(0, 8, 8)
    with pytest.raises(ContractError):
        flip_bit_int(200, 0, 8)


@given(st.integers(0, 2**32 - 1), st.integers(0, 31))
def test_f32_involution_on_all_patterns(bits, bit):
    v = np.array(bits, np.uint32).view(np.float32)[()]
    assert f32_bits(flip_bit_f32(flip_bit_f32(v, bit), bit)) == bits


@given(st.data(), st.sampled_from([8, 32]))
def test_int_involution(data, width):
    v = data.draw(st.integers(-(2 ** (width - 1)), 2 ** (width - 1) - 1))
    b = data.draw(st.integers(0, width - 1))
    assert flip_bit_int(flip_bit_int(v, b, width), b, width) == v


@given(st.floats(-2, 2, width=32, exclude_min=True, exclude_max=True).filter(lambda x: x != 0))
def test_exponent_msb_law(x):
    y = flip_bit_f32(x, 30)
    assert (f32_bits(x) >> 30) & 1 == 0
    assert not np.isfinite(y) or abs(y) > 2


def test_apply_undo_and_isolation():
    model = tiny_model()
    params = {k: np.array(v) for k, v in model.params.items()}
    before = {k: v.copy() for k, v in params.items()}
    spec = FaultSpec("c1/kernel", 5, 30)
    token = apply_fault(params, spec)
    changed = [k for k in params if not np.array_equal(params[k].view(np.uint32), before[k].view(np.uint32))]
    assert changed == ["c1/kernel"]
    assert np.count_nonzero(params["c1/kernel"].view(np.uint32) != before["c1/kernel"].view(np.uint32)) == 1
    undo_fault(params, token)
    assert all(np.array_equal(params[k].view(np.uint32), before[k].view(np.uint32)) for k in params)
    apply_fault(params, spec)
    apply_fault(params, spec)
    assert np.array_equal(params["c1/kernel"], before["c1/kernel"])

    private, token = faulted_copy(model.params, spec)
    assert f32_bits(private["c1/kernel"].reshape(-1)[5]) == token.flipped_bits
    assert f32_bits(model.params["c1/kernel"].reshape(-1)[5]) == token.original_bits


def test_fault_errors():
    model = tiny_model()
    params = {k: np.array(v) for k, v in model.params.items()}
    with pytest.raises(ContractError, match="unknown"):
        apply_fault(params, FaultSpec("nope/kernel", 0, 1))
    with pytest.raises(ContractError, match="out of bounds"):
        apply_fault(params, FaultSpec("c1/kernel", 10_000, 1))
    with pytest.raises(ContractError, match="read-only"):
        apply_fault(model.params, FaultSpec("c1/kernel", 0, 1))
    with pytest.raises(ContractError, match="domain"):
        apply_fault(params, FaultSpec("c1/kernel", 0, 1, Domain.I32))
    with pytest.raises(ContractError):
        FaultSpec("c1/kernel", 0, 8, Domain.I8)


def test_int_domain_faults():
    params = {"w": np.array([1, -1, 5], np.int8), "b": np.array([-1], np.int32)}
    apply_fault(params, FaultSpec("w", 0, 7, Domain.I8))
    apply_fault(params, FaultSpec("b", 0, 31, Domain.I32))
    assert params["w"][0] == -127 and params["b"][0] == 2**31 - 1


def test_plan_exhaustive_and_deterministic():
    model = tiny_model()
    full = gen_fault_plan(model, [31, 30], None, seed=1)
    assert len(full) == 2 * sum(ps.count for ps in model.param_sets())
    again = gen_fault_plan(model, [31, 30], 10_000, seed=99)
    assert {(f.param_set_id, f.element_index, f.bit_index) for f in again.faults} == {
        (f.param_set_id, f.element_index, f.bit_index) for f in full.faults
    }
    a = gen_fault_plan(model, [30], 5, seed=3)
    b = gen_fault_plan(model, [30], 5, seed=3)
    assert a.to_json() == b.to_json()
    assert gen_fault_plan(model, [30], 5, seed=4).faults != a.faults
    with pytest.raises(ContractError):
        gen_fault_plan(model, [], 5, seed=3)


def test_plan_no_duplicates_and_json_round_trip():
    model = tiny_model()
    plan = gen_fault_plan(model, range(31, 22, -1), 20, seed=8)
    for g in plan.groups:
        picked = [(f.element_index, f.bit_index) for f in plan.faults if f.param_set_id == g.param_set_id and f.bit_index == g.bit]
        assert len(picked) == len(set(picked)) == g.n
    back = FaultPlan.from_json(plan.to_json())
    assert back.faults == plan.faults and back.groups == plan.groups and back.rng == plan.rng


def test_set_population_unit():
    model = tiny_model()
    plan = gen_fault_plan(model, [31, 30, 29], 7, seed=2, sets=["c1/bias"], population_unit="set")
    assert [g.population for g in plan.groups] == [12]
    assert len({(f.element_index, f.bit_index) for f in plan.faults}) == 7


def test_plan_uniformity_chi_square():
    layers = [LayerSpec("head", LayerKind.OUTPUT_CONV, ("input",), {"filters": 10, "kernel": 1})]
    model = graph_from_layers(layers, (2, 2, 1), 10)
    counts = np.zeros(10, int)
    for seed in range(2000):
        plan = gen_fault_plan(model, [30], 3, seed=seed, sets=["head/bias"])
        for f in plan.faults:
            counts[f.element_index] += 1
    assert counts.sum() == 6000
    assert stats.chisquare(counts).pvalue > 0.001
