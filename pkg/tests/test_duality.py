import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fisheq import errors
from fisheq.duality import (
    CONJUGATE_TABLE,
    ConjugateKind,
    DualCertificate,
    DualProgramKind,
    conjugate_eval,
    dual_objective,
    excess_supply,
    fenchel_young_gap,
    gibbs_spending,
    reduced_dual,
)
from fisheq.model import MarketInstance

# frozen expected values, computed by hand from the conjugate table
EXPECTED_CONJUGATES = [
    (ConjugateKind.X_LOG_X, 1.0, 1.0),              # e^{1-1}
    (ConjugateKind.NEG_LOG, -1.0, -1.0),            # -1 - log(1)
    (ConjugateKind.HALF_SQUARE, 2.0, 2.0),          # (1/2) * 4
    (ConjugateKind.EXP, 1.0, -1.0),                 # 1*log(1) - 1
    (ConjugateKind.EXP, math.e, 0.0),               # e*1 - e
]


@pytest.mark.parametrize("kind,mu,want", EXPECTED_CONJUGATES)
def test_conjugate_table_values(kind, mu, want):
    assert conjugate_eval(kind, mu) == pytest.approx(want, abs=1e-12)


def test_conjugate_domains():
    with pytest.raises(errors.OutOfDomain):
        conjugate_eval(ConjugateKind.NEG_LOG, 0.0)
    with pytest.raises(errors.OutOfDomain):
        conjugate_eval(ConjugateKind.NEG_LOG, 0.5)
    with pytest.raises(errors.OutOfDomain):
        conjugate_eval(ConjugateKind.EXP, 0.0)
    with pytest.raises(errors.OutOfDomain):
        CONJUGATE_TABLE[ConjugateKind.NEG_LOG].value(0.0)
    with pytest.raises(errors.OutOfDomain):
        CONJUGATE_TABLE[ConjugateKind.X_LOG_X].value(-0.1)


def test_fenchel_young_hand_values():
    assert fenchel_young_gap(ConjugateKind.X_LOG_X, 1.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert fenchel_young_gap(ConjugateKind.X_LOG_X, 1.0, 0.0) == pytest.approx(
        0.36787944117144233, abs=1e-15)  # e^{-1}


def _random_x(kind, rng):
    if kind is ConjugateKind.NEG_LOG:
        return float(rng.uniform(0.05, 10.0))
    if kind is ConjugateKind.X_LOG_X:
        return float(rng.uniform(0.01, 10.0))
    return float(rng.uniform(-3.0, 3.0))


def test_gap_vanishes_at_gradient():
    rng = np.random.default_rng(7)
    for kind, pair in CONJUGATE_TABLE.items():
        for _ in range(100):
            x = _random_x(kind, rng)
            assert fenchel_young_gap(kind, x, pair.gradient(x)) <= 1e-10


def test_biconjugate_on_grid():
    # f**(x) = sup_mu (x*mu - f*(mu)); the grid contains grad f(x), where
    # the sup is attained, so equality with f(x) holds to rounding
    rng = np.random.default_rng(11)
    for kind, pair in CONJUGATE_TABLE.items():
        for _ in range(100):
            x = _random_x(kind, rng)
            mu_star = pair.gradient(x)
            grid = np.linspace(mu_star - 1.0, mu_star + 1.0, 4001)
            grid = grid[[pair.mu_in_domain(m) for m in grid]]
            best = max(x * m - pair.fstar(m) for m in grid)
            assert abs(best - pair.value(x)) <= 1e-9


@given(st.floats(0.01, 50.0), st.floats(-5.0, 5.0))
def test_gap_nonnegative_xlogx(x, mu):
    assert fenchel_young_gap(ConjugateKind.X_LOG_X, x, mu) >= 0.0


@given(st.floats(-20.0, 20.0), st.floats(-20.0, 20.0))
def test_gap_nonnegative_half_square(x, mu):
    assert fenchel_young_gap(ConjugateKind.HALF_SQUARE, x, mu) >= 0.0


def one_buyer():
    return MarketInstance([1.0], [[2.0]])


def test_dual_objective_hand_example():
    # B=1, v=2, equilibrium p=1, beta = p/v = 1/2
    cert = DualCertificate("eg", beta=np.array([0.5]), prices=np.array([1.0]))
    got = dual_objective(DualProgramKind.EG, one_buyer(), cert)
    assert got == pytest.approx(1.0 + math.log(2.0), abs=1e-12)
    # adding the dropped constant B log B - B = -1 recovers the
    # log-utility optimum log 2
    assert got + (1.0 * 0.0 - 1.0) == pytest.approx(math.log(2.0), abs=1e-12)


def test_dual_objective_infeasible():
    cert = DualCertificate("eg", beta=np.array([0.6]), prices=np.array([1.0]))
    with pytest.raises(errors.DualInfeasible):
        dual_objective(DualProgramKind.EG, one_buyer(), cert)
    cert = DualCertificate("ql", beta=np.array([1.5]), prices=np.array([4.0]))
    with pytest.raises(errors.DualInfeasible):
        dual_objective(DualProgramKind.QL, one_buyer(), cert)


def test_dual_objective_quasilinear_idle_buyer():
    # every value below its price, beta pinned at 1: buyer contributes 0
    inst = MarketInstance([2.0], [[0.5, 0.25]])
    cert = DualCertificate("ql", beta=np.array([1.0]), prices=np.array([1.0, 1.0]))
    assert dual_objective(DualProgramKind.QL, inst, cert) == pytest.approx(2.0, abs=1e-12)


def test_dual_objective_transaction_costs():
    # p + c >= v*beta allows beta = 1 here even though p < v
    inst = MarketInstance([1.0], [[2.0]])
    cert = DualCertificate("tc", beta=np.array([1.0]), prices=np.array([1.0]))
    got = dual_objective(DualProgramKind.TC, inst, cert, costs=[[1.0]])
    assert got == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(errors.DualInfeasible):
        dual_objective(DualProgramKind.TC, inst, cert, costs=[[0.5]])
    with pytest.raises(errors.ValidationError):
        dual_objective(DualProgramKind.TC, inst, cert)


def two_buyers_one_good():
    return MarketInstance([1.0, 1.0], [[1.0], [1.0]])


def test_excess_supply_hand_values():
    inst = two_buyers_one_good()
    assert excess_supply(inst, [2.0]).tolist() == [0.0]
    assert excess_supply(inst, [4.0]).tolist() == [0.5]


def test_excess_supply_errors():
    inst = two_buyers_one_good()
    with pytest.raises(errors.NonPositivePrice):
        excess_supply(inst, [0.0])
    tied = MarketInstance([1.0], [[1.0, 1.0]])
    with pytest.raises(errors.SubgradientSet):
        excess_supply(tied, [1.0, 1.0])


def test_excess_supply_matches_finite_differences():
    rng = np.random.default_rng(3)
    inst = MarketInstance([1.0, 2.0, 0.5],
                          [[1.0, 2.0, 0.3], [0.4, 1.0, 2.0], [2.0, 0.2, 1.0]])
    h = 1e-6
    for _ in range(50):
        p = rng.uniform(0.5, 3.0, size=3)
        try:
            grad = excess_supply(inst, p)
        except errors.SubgradientSet:
            continue
        for j in range(3):
            lo, hi = p.copy(), p.copy()
            lo[j] -= h
            hi[j] += h
            fd = (reduced_dual(inst, hi) - reduced_dual(inst, lo)) / (2 * h)
            assert abs(fd - grad[j]) <= 1e-4


def test_gibbs_spending_hand_example():
    b = gibbs_spending([1.0, 3.0])
    assert b.tolist() == [0.25, 0.75]
    objective = sum(x * math.log(v / x) for v, x in zip([1.0, 3.0], b))
    assert objective == pytest.approx(math.log(4.0), abs=1e-12)
    # grid search over the simplex confirms the maximizer
    ts = np.arange(0.001, 1.0, 0.001)
    vals = ts * np.log(1.0 / ts) + (1 - ts) * np.log(3.0 / (1 - ts))
    assert vals.max() <= math.log(4.0) + 1e-12


def test_gibbs_spending_trivial_cases():
    assert gibbs_spending([5.0]).tolist() == [1.0]
    assert gibbs_spending([2.0, 2.0]).tolist() == [0.5, 0.5]
    with pytest.raises(errors.AllZero):
        gibbs_spending([0.0, 0.0])


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=6).filter(lambda v: sum(v) > 1e-9))
def test_gibbs_spending_sums_to_one(values):
    assert gibbs_spending(values).sum() == pytest.approx(1.0, abs=1e-12)
