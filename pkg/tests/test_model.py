import json
import math

import numpy as np
import pytest

from fisheq import errors
from fisheq.model import (
    CES,
    Leontief,
    Linear,
    MarketInstance,
    QuasiLinear,
    Segment,
    SpendingConstraint,
    SpendingProfile,
    instance_from_json,
    instance_to_json,
    normalize_valuations,
    scale_agent,
    validate_instance,
)


def linear_instance(budgets, values, spending_caps=None, utility_caps=None):
    return MarketInstance(np.array(budgets, dtype=float), np.array(values, dtype=float),
                          utility_caps=utility_caps, spending_caps=spending_caps)


class FakeEq:
    def __init__(self, prices, allocation):
        self.prices = np.array(prices, dtype=float)
        self.allocation = np.array(allocation, dtype=float)


def test_validate_accepts_plain_instance():
    inst = linear_instance([1.0, 2.0], [[1, 2], [3, 0]])
    assert validate_instance(inst) is inst
    # idempotent
    validate_instance(inst)


def test_validate_freezes_arrays():
    inst = validate_instance(linear_instance([1.0], [[1.0]]))
    with pytest.raises(ValueError):
        inst.values[0, 0] = 5.0


def test_negative_budget():
    with pytest.raises(errors.NegativeBudget):
        validate_instance(linear_instance([-1.0], [[1.0]]))
    with pytest.raises(errors.NegativeBudget):
        validate_instance(linear_instance([0.0], [[1.0]]))


def test_empty_market():
    with pytest.raises(errors.EmptyMarket):
        validate_instance(linear_instance([], np.zeros((0, 2))))
    with pytest.raises(errors.EmptyMarket):
        validate_instance(linear_instance([1.0], np.zeros((1, 0))))


def test_bad_ces_exponent():
    for rho in (0.0, 1.0, 1.5):
        inst = MarketInstance([1.0], [[1.0]], kinds=[CES(rho, (1.0,))])
        with pytest.raises(errors.BadCesExponent):
            validate_instance(inst)
    # any rho < 1 except 0 is allowed, including strongly negative ones
    for rho in (0.5, -1.0, -25.0):
        validate_instance(MarketInstance([1.0], [[1.0]], kinds=[CES(rho, (1.0,))]))


def test_non_decreasing_segments():
    segs = ((Segment(1.0, 1.0), Segment(1.0, 1.0)),)
    inst = MarketInstance([1.0], [[1.0]], kinds=[SpendingConstraint(segs)])
    with pytest.raises(errors.NonDecreasingSegments):
        validate_instance(inst)
    ok = ((Segment(2.0, 1.0), Segment(1.0, 1.0)),)
    validate_instance(MarketInstance([1.0], [[1.0]], kinds=[SpendingConstraint(ok)]))


def test_mixed_caps():
    inst = linear_instance([1.0], [[1.0]], spending_caps=[1.0], utility_caps=[1.0])
    with pytest.raises(errors.MixedCaps):
        validate_instance(inst)


def test_zero_utility_cap_is_empty_demand():
    inst = linear_instance([1.0], [[1.0]], utility_caps=[0.0])
    with pytest.raises(errors.EmptyDemand):
        validate_instance(inst)


def test_dimension_mismatch():
    inst = MarketInstance([1.0, 1.0], [[1.0], [1.0]], kinds=[Linear()])
    with pytest.raises(errors.DimensionMismatch):
        validate_instance(inst)
    inst = MarketInstance([1.0], [[1.0, 2.0]], kinds=[Leontief((1.0,))])
    with pytest.raises(errors.DimensionMismatch):
        validate_instance(inst)


def test_worthless_goods():
    inst = linear_instance([1.0, 1.0], [[1, 0, 0], [2, 0, 1]])
    assert list(inst.worthless_goods()) == [False, True, False]
    # leontief desire comes from phi, not the valuation row
    inst = MarketInstance([1.0], [[0.0, 0.0]], kinds=[Leontief((0.0, 3.0))])
    assert list(inst.worthless_goods()) == [True, False]


def test_scale_agent():
    inst = linear_instance([1.0, 1.0], [[1, 2], [3, 4]])
    out = scale_agent(inst, 1, 0.5)
    assert out.values[1].tolist() == [1.5, 2.0]
    assert out.values[0].tolist() == [1.0, 2.0]
    with pytest.raises(errors.NonPositiveScale):
        scale_agent(inst, 0, 0.0)


def test_normalize_valuations_hand_example():
    # supports are disjoint singletons, so each row is scaled to the price
    inst = linear_instance([1.0, 1.0], [[2.0, 0.0], [0.0, 4.0]])
    eq = FakeEq([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]])
    out = normalize_valuations(inst, eq)
    assert out.values.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    # idempotent
    again = normalize_valuations(out, eq)
    assert again.values.tolist() == out.values.tolist()


def test_normalize_valuations_errors():
    inst = linear_instance([1.0], [[2.0, 1.0]])
    with pytest.raises(errors.UnsupportedBuyer):
        normalize_valuations(inst, FakeEq([1.0, 1.0], [[0.0, 0.0]]))
    # both goods bought at equal prices but different values: no single scale
    with pytest.raises(errors.InconsistentSupport):
        normalize_valuations(inst, FakeEq([1.0, 1.0], [[0.5, 0.5]]))


def test_spending_profile_totals():
    sp = SpendingProfile(np.array([[1.0, 2.0], [3.0, 0.0]]))
    assert sp.q.tolist() == [4.0, 2.0]
    assert sp.row_sums().tolist() == [3.0, 3.0]


def test_json_round_trip():
    doc = {
        "buyers": [
            {"budget": 1.0, "values": [1.0, 2.0], "utility": {"kind": "linear"}},
            {"budget": 2.0, "values": [3.0, 0.0], "utility": {"kind": "quasilinear"},
             "utility_cap": 5.0},
        ],
        "goods": [{}, {}],
    }
    inst = instance_from_json(json.dumps(doc))
    assert inst.n == 2 and inst.m == 2
    assert isinstance(inst.kinds[1], QuasiLinear)
    assert inst.utility_caps[1] == 5.0 and math.isinf(inst.utility_caps[0])
    out = instance_to_json(inst)
    assert instance_from_json(out).values.tolist() == inst.values.tolist()


def test_json_all_kinds_round_trip():
    doc = {
        "buyers": [
            {"budget": 1.0, "values": [1.0, 1.0],
             "utility": {"kind": "leontief", "phi": [1.0, 2.0]}},
            {"budget": 1.0, "values": [1.0, 1.0],
             "utility": {"kind": "ces", "rho": 0.5, "phi": [1.0, 3.0]}},
            {"budget": 1.0, "values": [1.0, 1.0],
             "utility": {"kind": "spending_constraint",
                         "segments": [[{"rate": 2.0, "length": 0.5}],
                                      [{"rate": 1.0, "length": 1.0}]]}},
        ],
        "goods": [{}, {}],
    }
    inst = instance_from_json(doc)
    assert isinstance(inst.kinds[0], Leontief) and inst.kinds[0].phi == (1.0, 2.0)
    assert isinstance(inst.kinds[1], CES) and inst.kinds[1].rho == 0.5
    assert isinstance(inst.kinds[2], SpendingConstraint)
    assert inst.kinds[2].segments[0][0] == Segment(2.0, 0.5)
    back = instance_to_json(inst)
    assert instance_from_json(back).kinds == inst.kinds


def test_json_rejects_unknown_fields():
    base = {"buyers": [{"budget": 1.0, "values": [1.0], "utility": {"kind": "linear"}}],
            "goods": [{}]}
    bad_top = dict(base, extra=1)
    with pytest.raises(errors.ValidationError):
        instance_from_json(bad_top)
    bad_buyer = {"buyers": [dict(base["buyers"][0], name="alice")], "goods": [{}]}
    with pytest.raises(errors.ValidationError):
        instance_from_json(bad_buyer)
    bad_utility = {"buyers": [{"budget": 1.0, "values": [1.0],
                               "utility": {"kind": "linear", "alpha": 2}}],
                   "goods": [{}]}
    with pytest.raises(errors.ValidationError):
        instance_from_json(bad_utility)
    bad_good = {"buyers": base["buyers"], "goods": [{"supply": 2}]}
    with pytest.raises(errors.ValidationError):
        instance_from_json(bad_good)


def test_json_spending_caps():
    doc = {"buyers": [{"budget": 1.0, "values": [1.0, 1.0]}],
           "goods": [{"spending_cap": 0.5}, {}]}
    inst = instance_from_json(doc)
    assert inst.spending_caps[0] == 0.5 and math.isinf(inst.spending_caps[1])
    assert inst.has_spending_caps and not inst.has_utility_caps
