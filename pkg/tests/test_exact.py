import math
from fractions import Fraction

import numpy as np
import pytest

from fisheq import MarketInstance, ModelKind, SolveOptions, solve
from fisheq.errors import (
    AmbiguousSupport,
    DegenerateSupport,
    IrrationalParameters,
    ModelMismatch,
)
from fisheq.exact import (
    RationalEquilibrium,
    SupportStructure,
    detect_support,
    exact_equilibrium,
    verify_exact,
)
from fisheq.model import Leontief, Segment, SpendingConstraint, SpendingProfile
from fisheq.solver import Equilibrium


def make_eq(prices, allocation, utilities, spending, segment_spend=None):
    return Equilibrium(np.asarray(prices, dtype=float),
                       np.asarray(allocation, dtype=float),
                       np.asarray(utilities, dtype=float),
                       SpendingProfile(np.asarray(spending, dtype=float),
                                       segment_spend))


def test_single_buyer_solves_to_exact_fractions():
    # money splits in proportion to value: p = (1/4, 3/4) with no rounding
    inst = MarketInstance([1.0], [[1.0, 3.0]])
    support = SupportStructure(ModelKind.FISHER, (frozenset({0, 1}),), frozenset())
    req = exact_equilibrium(inst, support)
    assert req.prices == (Fraction(1, 4), Fraction(3, 4))
    assert req.alphas == (Fraction(1, 4),)
    assert req.spending == ((Fraction(1, 4), Fraction(3, 4)),)
    assert verify_exact(req, inst, support)


def test_capped_single_buyer_takes_smallest_price_above_cap():
    inst = MarketInstance([1.0], [[1.0]], spending_caps=[1.0])
    support = SupportStructure(ModelKind.SR, (frozenset({0}),), frozenset({0}))
    req = exact_equilibrium(inst, support)
    assert req.prices == (Fraction(1),)
    assert req.alphas == (Fraction(1),)
    assert req.spending == ((Fraction(1),),)


def test_non_mbb_purchase_is_degenerate():
    # claiming the buyer spends only on the worse good contradicts the
    # rate ceiling on the unsold better one
    inst = MarketInstance([1.0], [[1.0, 3.0]])
    support = SupportStructure(ModelKind.FISHER, (frozenset({0}),), frozenset())
    with pytest.raises(DegenerateSupport):
        exact_equilibrium(inst, support)


def test_detect_thresholds_spending():
    inst = MarketInstance([0.5], [[1.0, 1.0]])
    eq = make_eq([0.5, 0.0], [[1.0, 0.0]], [1.0], [[0.5, 1e-12]])
    support = detect_support(eq, inst, 1e-8)
    assert support.model is ModelKind.FISHER
    assert support.purchases == (frozenset({0}),)
    assert support.binding == frozenset()


def test_detect_binding_cap_on_solved_instance():
    inst = MarketInstance([1.0], [[1.0]], spending_caps=[1.0])
    eq = solve(inst, ModelKind.SR)
    support = detect_support(eq, inst, 1e-6)
    assert support.model is ModelKind.SR
    assert support.binding == frozenset({0})


def test_detect_ambiguous_segment():
    # a segment shorter than the tolerance window cannot be classified
    kind = SpendingConstraint(((Segment(2.0, 1e-9), Segment(1.0, 1.0)),))
    inst = MarketInstance([1.0], [[1.0]], kinds=[kind], spending_caps=[5.0])
    eq = make_eq([1.0], [[1.0]], [1.0], [[1.0]],
                 segment_spend=[5e-10, 1.0 - 5e-10])
    with pytest.raises(AmbiguousSupport):
        detect_support(eq, inst, 1e-8)


def test_verify_rejects_perturbed_numerators():
    inst = MarketInstance([1.0], [[1.0, 3.0]])
    support = SupportStructure(ModelKind.FISHER, (frozenset({0, 1}),), frozenset())
    req = exact_equilibrium(inst, support)
    bumped_price = RationalEquilibrium(
        prices=(Fraction(2, 4), req.prices[1]),
        spending=req.spending,
        alphas=req.alphas,
    )
    assert not verify_exact(bumped_price, inst, support)
    bumped_spend = RationalEquilibrium(
        prices=req.prices,
        spending=((Fraction(2, 4), Fraction(3, 4)),),
        alphas=req.alphas,
    )
    assert not verify_exact(bumped_spend, inst, support)


def test_capped_utility_takes_largest_affordable_scale():
    # every buyer satiated leaves a free price scale; the budget bound
    # picks the same point the numeric solver reports
    inst = MarketInstance([2.0], [[1.0]], utility_caps=[1.0])
    support = SupportStructure(ModelKind.UR, (frozenset({0}),), frozenset({0}))
    req = exact_equilibrium(inst, support)
    assert req.prices == (Fraction(2),)
    assert req.alphas == (Fraction(2),)
    assert req.spending == ((Fraction(2),),)
    assert verify_exact(req, inst, support)


def test_segment_support_solves_exactly():
    kind = SpendingConstraint(((Segment(2.0, 0.5), Segment(1.0, 1.0)),))
    inst = MarketInstance([1.0], [[1.0]], kinds=[kind], spending_caps=[5.0])
    support = SupportStructure(ModelKind.SC, (frozenset({0}),), frozenset(),
                               ((("+", "0"),),))
    req = exact_equilibrium(inst, support)
    assert req.prices == (Fraction(1),)
    assert req.alphas == (Fraction(1),)
    assert req.segment_spending[0][0] == (Fraction(1, 2), Fraction(1, 2))
    assert verify_exact(req, inst, support)


def test_json_round_trip_uses_num_den_strings():
    inst = MarketInstance([1.0], [[1.0, 3.0]])
    support = SupportStructure(ModelKind.FISHER, (frozenset({0, 1}),), frozenset())
    req = exact_equilibrium(inst, support)
    doc = req.to_json()
    assert doc["prices"] == ["1/4", "3/4"]
    assert doc["alphas"] == ["1/4"]
    assert RationalEquilibrium.from_json(doc) == req


def test_non_finite_budget_is_rejected():
    inst = MarketInstance([math.nan], [[1.0]])
    support = SupportStructure(ModelKind.FISHER, (frozenset({0}),), frozenset())
    with pytest.raises(IrrationalParameters):
        exact_equilibrium(inst, support)


def test_leontief_extraction_out_of_scope():
    inst = MarketInstance([1.0], [[1.0]], kinds=[Leontief((1.0,))],
                          utility_caps=[5.0])
    eq = make_eq([1.0], [[1.0]], [1.0], [[1.0]])
    with pytest.raises(ModelMismatch):
        detect_support(eq, inst, 1e-6)


def _dyadic(rng, lo, hi, shape=None):
    # eighths keep every parameter an exact small fraction
    return np.asarray(rng.integers(lo * 8, hi * 8, size=shape)) / 8.0


def test_round_trip_random_plain_instances():
    rng = np.random.default_rng(3)
    for _ in range(8):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        inst = MarketInstance(_dyadic(rng, 1, 3, n), _dyadic(rng, 1, 9, (n, m)))
        eq = solve(inst, ModelKind.FISHER, SolveOptions(tolerance=1e-12))
        support = detect_support(eq, inst, 1e-6)
        req = exact_equilibrium(inst, support)
        assert verify_exact(req, inst, support)
        drift = max(abs(float(f) - p) for f, p in zip(req.prices, eq.prices))
        assert drift <= 1e-6


def test_round_trip_random_capped_instances():
    rng = np.random.default_rng(11)
    for _ in range(8):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        budgets = _dyadic(rng, 1, 3, n)
        # keep one good uncapped so the caps can always absorb the money
        caps = np.full(m, math.inf)
        for j in range(1, m):
            if rng.random() < 0.6:
                caps[j] = float(_dyadic(rng, 1, 3))
        if m == 1:
            caps[0] = float(budgets.sum())
        inst = MarketInstance(budgets, _dyadic(rng, 1, 9, (n, m)),
                              spending_caps=caps)
        eq = solve(inst, ModelKind.SR, SolveOptions(tolerance=1e-12))
        support = detect_support(eq, inst, 1e-6)
        req = exact_equilibrium(inst, support)
        assert verify_exact(req, inst, support)
        drift = max(abs(float(f) - p) for f, p in zip(req.prices, eq.prices))
        assert drift <= 1e-6


def test_round_trip_random_capped_utility_instances():
    rng = np.random.default_rng(19)
    for _ in range(8):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        d = np.where(rng.random(n) < 0.5, _dyadic(rng, 1, 3, n), math.inf)
        if not np.isfinite(d).any():
            d[0] = 1.0
        inst = MarketInstance(_dyadic(rng, 1, 3, n), _dyadic(rng, 1, 9, (n, m)),
                              utility_caps=d)
        eq = solve(inst, ModelKind.UR, SolveOptions(tolerance=1e-12))
        support = detect_support(eq, inst, 1e-6)
        req = exact_equilibrium(inst, support)
        assert verify_exact(req, inst, support)
        drift = max(abs(float(f) - p) for f, p in zip(req.prices, eq.prices))
        assert drift <= 1e-6


def test_round_trip_random_segment_instances():
    rng = np.random.default_rng(29)
    done = 0
    for _ in range(8):
        n = int(rng.integers(1, 3))
        m = int(rng.integers(1, 3))
        kinds = []
        for _i in range(n):
            rows = []
            for _j in range(m):
                top = float(_dyadic(rng, 2, 6))
                rows.append((Segment(top, float(_dyadic(rng, 1, 3))),
                             Segment(top / 2.0, float(_dyadic(rng, 1, 3)))))
            kinds.append(SpendingConstraint(tuple(rows)))
        budgets = _dyadic(rng, 1, 3, n)
        caps = np.full(m, math.inf)
        caps[0] = float(budgets.sum()) if m == 1 else float(_dyadic(rng, 2, 5))
        total_len = [sum(s.length for row in k.segments for s in row)
                     for k in kinds]
        if any(b > t for b, t in zip(budgets, total_len)):
            continue
        inst = MarketInstance(budgets, np.ones((n, m)), kinds=kinds,
                              spending_caps=caps)
        eq = solve(inst, ModelKind.SC, SolveOptions(tolerance=1e-10))
        support = detect_support(eq, inst, 1e-6)
        req = exact_equilibrium(inst, support)
        assert verify_exact(req, inst, support)
        drift = max(abs(float(f) - p) for f, p in zip(req.prices, eq.prices))
        assert drift <= 1e-6
        done += 1
    assert done >= 4
