import math

import numpy as np
import pytest

from fisheq import errors
from fisheq.model import (
    CES,
    Leontief,
    MarketInstance,
    ModelKind,
    QuasiLinear,
    Segment,
    SpendingConstraint,
    SpendingProfile,
)
from fisheq.solver import (
    Equilibrium,
    Method,
    SolveOptions,
    proportional_response_step,
    recover_prices,
    shmyrev_certificate,
    solve,
)
from fisheq.verify import check_equilibrium


def linear(budgets, values, **kw):
    return MarketInstance(np.asarray(budgets, dtype=float),
                          np.asarray(values, dtype=float), **kw)


def checked(inst, model, eq, tol=1e-6):
    report = check_equilibrium(inst, eq, model, tol)
    assert report.passed, report.to_json()
    return eq


def test_fisher_symmetric_two_by_two():
    inst = linear([1.0, 1.0], [[1.0, 1.0], [1.0, 1.0]])
    eq = checked(inst, ModelKind.FISHER, solve(inst, ModelKind.FISHER))
    # spending itself is underdetermined here; prices and totals are not
    assert eq.prices == pytest.approx([1.0, 1.0], abs=1e-8)
    assert eq.spending.b.sum(axis=0) == pytest.approx([1.0, 1.0], abs=1e-8)
    assert eq.spending.b.sum(axis=1) == pytest.approx([1.0, 1.0], abs=1e-8)


def test_fisher_single_buyer_value_split():
    inst = linear([1.0], [[1.0, 3.0]])
    eq = checked(inst, ModelKind.FISHER, solve(inst, ModelKind.FISHER))
    assert eq.prices == pytest.approx([0.25, 0.75], abs=1e-9)
    assert eq.utilities == pytest.approx([4.0], abs=1e-8)


def test_proportional_response_hand_step():
    inst = linear([1.0], [[1.0, 3.0]])
    sp = proportional_response_step(inst, SpendingProfile(np.array([[0.5, 0.5]])))
    assert sp.b == pytest.approx(np.array([[0.25, 0.75]]), abs=1e-15)


def test_proportional_response_monotone_objective():
    inst = linear([1.0, 2.0], [[1.0, 4.0, 0.5], [2.0, 1.0, 3.0]])
    sp = SpendingProfile(np.array([[0.4, 0.3, 0.3], [0.8, 0.6, 0.6]]))
    last = shmyrev_certificate(inst, sp).primal_objective
    for _ in range(40):
        sp = proportional_response_step(inst, sp)
        cur = shmyrev_certificate(inst, sp).primal_objective
        assert cur >= last - 1e-12
        last = cur


def test_methods_agree_on_prices():
    rng = np.random.default_rng(2)
    for _ in range(5):
        inst = linear(rng.uniform(0.5, 2.0, 3), rng.uniform(0.2, 4.0, (3, 4)))
        q_pr = solve(inst, ModelKind.FISHER,
                     SolveOptions(method=Method.PROPORTIONAL_RESPONSE)).prices
        q_fo = solve(inst, ModelKind.FISHER,
                     SolveOptions(method=Method.PROJECTED_FIRST_ORDER)).prices
        assert q_pr == pytest.approx(q_fo, abs=1e-6)


def test_restarts_agree_on_prices():
    inst = linear([1.3, 0.7, 2.1], [[1.0, 2.0, 0.0], [3.0, 0.5, 1.0], [0.0, 1.0, 2.0]],
                  spending_caps=[0.8, math.inf, math.inf])
    base = solve(inst, ModelKind.SR, SolveOptions(seed=0)).prices
    for seed in range(1, 6):
        got = solve(inst, ModelKind.SR, SolveOptions(seed=seed)).prices
        assert got == pytest.approx(base, abs=1e-6)


def test_sr_single_buyer_cap_binds():
    inst = linear([1.0], [[1.0]], spending_caps=[1.0])
    eq = checked(inst, ModelKind.SR, solve(inst, ModelKind.SR))
    assert eq.prices == pytest.approx([1.0], abs=1e-9)


def test_sr_infeasible_when_caps_short():
    inst = linear([2.0], [[1.0]], spending_caps=[1.0])
    with pytest.raises(errors.Infeasible):
        solve(inst, ModelKind.SR)


def test_sr_infeasible_by_connectivity():
    # total caps would do, but buyer 0 can only reach the capped good
    inst = linear([1.0, 1.0], [[1.0, 0.0], [1.0, 1.0]],
                  spending_caps=[0.5, math.inf])
    with pytest.raises(errors.Infeasible):
        solve(inst, ModelKind.SR)


def test_sr_two_buyer_capped_price_lift():
    inst = linear([1.0, 1.0], [[3.0, 1.0], [1.0, 3.0]],
                  spending_caps=[0.5, math.inf])
    eq = checked(inst, ModelKind.SR, solve(inst, ModelKind.SR))
    assert eq.prices == pytest.approx([4.5, 1.5], abs=1e-8)
    assert eq.spending.b.sum(axis=0) == pytest.approx([0.5, 1.5], abs=1e-8)


def test_ur_cap_binds_single_buyer():
    inst = linear([2.0], [[1.0]], utility_caps=[1.0])
    eq = checked(inst, ModelKind.UR, solve(inst, ModelKind.UR))
    assert eq.prices == pytest.approx([2.0], abs=1e-8)
    assert eq.utilities == pytest.approx([1.0], abs=1e-9)


def test_ur_never_infeasible():
    # tight caps leave goods unsold, never an empty feasible set
    rng = np.random.default_rng(9)
    for _ in range(10):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        inst = linear(rng.uniform(0.5, 2.0, n), rng.uniform(0.2, 3.0, (n, m)),
                      utility_caps=rng.uniform(0.05, 0.3, n))
        checked(inst, ModelKind.UR, solve(inst, ModelKind.UR))


def test_ql_buyer_spends_everything():
    inst = linear([1.0], [[3.0]], kinds=[QuasiLinear()])
    eq = checked(inst, ModelKind.QL, solve(inst, ModelKind.QL))
    assert eq.prices == pytest.approx([1.0], abs=1e-9)
    assert eq.utilities == pytest.approx([3.0], abs=1e-8)


def test_ql_buyer_keeps_change():
    inst = linear([5.0], [[3.0]], kinds=[QuasiLinear()])
    eq = checked(inst, ModelKind.QL, solve(inst, ModelKind.QL))
    assert eq.prices == pytest.approx([3.0], abs=1e-8)
    assert eq.utilities == pytest.approx([5.0], abs=1e-8)
    assert float(eq.spending.b.sum()) == pytest.approx(3.0, abs=1e-8)


def test_leontief_single_buyer():
    inst = linear([1.0], [[1.0, 1.0]], kinds=[Leontief((1.0, 1.0))],
                  utility_caps=[5.0])
    eq = checked(inst, ModelKind.UR, solve(inst, ModelKind.UR))
    assert eq.prices == pytest.approx([0.5, 0.5], abs=1e-8)
    assert eq.utilities == pytest.approx([1.0], abs=1e-8)


def test_leontief_capped_buyer_frees_a_good():
    inst = linear([1.0, 2.0], [[1.0, 0.5], [0.5, 1.0]],
                  kinds=[Leontief((1.0, 0.5)), Leontief((0.5, 1.0))],
                  utility_caps=[0.6, math.inf])
    eq = checked(inst, ModelKind.UR, solve(inst, ModelKind.UR))
    assert eq.prices == pytest.approx([0.0, 2.0 / 0.7], abs=1e-7)
    assert eq.utilities == pytest.approx([0.6, 0.7], abs=1e-8)


def test_ces_single_buyer():
    inst = linear([2.0], [[1.0]], kinds=[CES(rho=0.5, weights=(1.0,))],
                  utility_caps=[10.0])  # slack cap, budget binds first
    eq = checked(inst, ModelKind.UR, solve(inst, ModelKind.UR))
    assert eq.prices == pytest.approx([2.0], abs=1e-8)
    assert eq.utilities == pytest.approx([1.0], abs=1e-8)


def sc_instance():
    segs = SpendingConstraint(((Segment(2.0, 0.5), Segment(1.0, 1.0)),))
    return MarketInstance([1.0], [[2.0]], kinds=[segs], spending_caps=[5.0])


def test_sc_single_buyer_two_segments():
    inst = sc_instance()
    eq = checked(inst, ModelKind.SC, solve(inst, ModelKind.SC))
    assert eq.prices == pytest.approx([1.0], abs=1e-9)
    assert eq.spending.segment_spend == pytest.approx([0.5, 0.5], abs=1e-9)


def test_sc_fill_order_over_random_instances():
    rng = np.random.default_rng(31)
    for _ in range(8):
        n, m = 2, 3
        B = rng.uniform(0.5, 2.0, n)
        rows = []
        vals = np.zeros((n, m))
        for i in range(n):
            row = []
            for j in range(m):
                ns = int(rng.integers(1, 4))
                rates = np.sort(rng.uniform(0.3, 4.0, ns))[::-1]
                lens = rng.uniform(0.4, 1.5, ns)
                row.append(tuple(Segment(float(r), float(l))
                                 for r, l in zip(rates, lens)))
                vals[i, j] = rates[0]
            rows.append(tuple(row))
        caps = np.array([rng.uniform(1.0, 3.0), math.inf, math.inf])
        inst = MarketInstance(B, vals, kinds=[SpendingConstraint(r) for r in rows],
                              spending_caps=caps)
        try:
            eq = solve(inst, ModelKind.SC)
        except errors.Infeasible:
            continue
        segs = eq.spending.segment_spend
        k = 0
        for i in range(n):
            for j in range(m):
                row = inst.kinds[i].segments[j]
                for l in range(1, len(row)):
                    if segs[k + l] > 1e-9:
                        # money on a later segment only after the earlier is full
                        assert segs[k + l - 1] >= row[l - 1].length - 1e-9
                k += len(row)


def test_recover_prices_uncapped_equals_column_sums():
    inst = linear([1.0], [[1.0, 3.0]])
    p = recover_prices(inst, SpendingProfile(np.array([[0.25, 0.75]])))
    assert p == pytest.approx([0.25, 0.75], abs=1e-12)


def test_recover_prices_propagates_onto_caps():
    inst = linear([1.0, 1.0], [[3.0, 1.0], [1.0, 3.0]],
                  spending_caps=[0.5, math.inf])
    sp = SpendingProfile(np.array([[0.5, 0.5], [0.0, 1.0]]))
    assert recover_prices(inst, sp) == pytest.approx([4.5, 1.5], abs=1e-9)


def test_recover_prices_capped_only_component():
    # no uncapped anchor: scale so the tightest cap ratio is one
    inst = linear([1.0], [[1.0]], spending_caps=[1.0])
    p = recover_prices(inst, SpendingProfile(np.array([[1.0]])))
    assert p == pytest.approx([1.0], abs=1e-12)


def test_recover_prices_inconsistent_rates():
    inst = linear([2.0], [[1.0, 3.0]])
    sp = SpendingProfile(np.array([[1.0, 1.0]]))  # rates 1 vs 3 on support
    with pytest.raises(errors.InconsistentRates):
        recover_prices(inst, sp)


def test_solver_reports_diagnostics():
    inst = linear([1.0], [[1.0, 3.0]])
    eq = solve(inst, ModelKind.FISHER)
    assert eq.iterations > 0
    assert eq.residual <= 1e-8
    assert eq.certificate is not None
    doc = eq.to_json()
    assert set(doc) == {"prices", "allocation", "spending", "utilities",
                        "diagnostics"}
    back = Equilibrium.from_json(doc)
    assert back.prices == pytest.approx(eq.prices, abs=0.0)


def test_method_restriction():
    inst = linear([1.0], [[1.0]], spending_caps=[1.0])
    with pytest.raises(errors.ModelMismatch):
        solve(inst, ModelKind.SR,
              SolveOptions(method=Method.PROPORTIONAL_RESPONSE))
