"""Fenchel conjugates and numeric dual-objective evaluators.

The conjugate table covers the four scalar functions the convex programs
are built from.  On top of it sit the money-format dual objective
(with the quasi-linear and transaction-cost variants), the reduced
unconstrained dual whose gradient is per-good excess supply, and the
closed-form entropy maximizer used by the welfare bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import (
    AllZero,
    DualInfeasible,
    NonPositivePrice,
    OutOfDomain,
    SubgradientSet,
    ValidationError,
)
from .model import MarketInstance


class ConjugateKind(Enum):
    HALF_SQUARE = "half_square"
    NEG_LOG = "neg_log"
    X_LOG_X = "x_log_x"
    EXP = "exp"


@dataclass(frozen=True)
class ConjugatePair:
    """A scalar convex function with its conjugate and gradient.

    x_in_domain / mu_in_domain guard value() and conjugate(); gradient()
    shares the primal domain except XLogX, whose gradient needs x > 0.
    """

    kind: ConjugateKind
    f: Callable[[float], float]
    fstar: Callable[[float], float]
    grad: Callable[[float], float]
    x_in_domain: Callable[[float], bool]
    mu_in_domain: Callable[[float], bool]

    def value(self, x: float) -> float:
        if not self.x_in_domain(x):
            raise OutOfDomain("%s: x=%r outside domain" % (self.kind.value, x))
        return self.f(x)

    def conjugate(self, mu: float) -> float:
        if not self.mu_in_domain(mu):
            raise OutOfDomain("%s: mu=%r outside conjugate domain" % (self.kind.value, mu))
        return self.fstar(mu)

    def gradient(self, x: float) -> float:
        if not self.x_in_domain(x):
            raise OutOfDomain("%s: x=%r outside domain" % (self.kind.value, x))
        if self.kind is ConjugateKind.X_LOG_X and x == 0:
            raise OutOfDomain("x_log_x: gradient undefined at 0")
        return self.grad(x)


def _xlogx(x: float) -> float:
    return 0.0 if x == 0 else x * math.log(x)


CONJUGATE_TABLE: dict[ConjugateKind, ConjugatePair] = {
    ConjugateKind.HALF_SQUARE: ConjugatePair(
        ConjugateKind.HALF_SQUARE,
        f=lambda x: 0.5 * x * x,
        fstar=lambda mu: 0.5 * mu * mu,
        grad=lambda x: x,
        x_in_domain=lambda x: math.isfinite(x),
        mu_in_domain=lambda mu: math.isfinite(mu),
    ),
    ConjugateKind.NEG_LOG: ConjugatePair(
        ConjugateKind.NEG_LOG,
        f=lambda x: -math.log(x),
        fstar=lambda mu: -1.0 - math.log(-mu),
        grad=lambda x: -1.0 / x,
        x_in_domain=lambda x: x > 0,
        mu_in_domain=lambda mu: mu < 0,
    ),
    ConjugateKind.X_LOG_X: ConjugatePair(
        ConjugateKind.X_LOG_X,
        f=_xlogx,
        fstar=lambda mu: math.exp(mu - 1.0),
        grad=lambda x: 1.0 + math.log(x),
        x_in_domain=lambda x: x >= 0,
        mu_in_domain=lambda mu: math.isfinite(mu),
    ),
    ConjugateKind.EXP: ConjugatePair(
        ConjugateKind.EXP,
        f=math.exp,
        fstar=lambda mu: mu * math.log(mu) - mu,
        grad=math.exp,
        x_in_domain=lambda x: math.isfinite(x),
        mu_in_domain=lambda mu: mu > 0,
    ),
}


def conjugate_eval(kind: ConjugateKind, mu: float) -> float:
    return CONJUGATE_TABLE[kind].conjugate(mu)


def fenchel_young_gap(kind: ConjugateKind, x: float, mu: float) -> float:
    """f(x) + f*(mu) - mu*x; nonnegative, zero exactly when mu = grad f(x)."""
    pair = CONJUGATE_TABLE[kind]
    gap = pair.value(x) + pair.conjugate(mu) - mu * x
    if gap < 0:
        # only rounding noise may dip below zero
        return 0.0 if gap > -1e-12 else gap
    return gap


class DualProgramKind(Enum):
    EG = "eg"
    QL = "ql"
    TC = "tc"


@dataclass
class DualCertificate:
    """Multipliers backing one solve, plus both objective values.

    Which vectors are present depends on the program: beta/gamma for the
    money-format duals, lam for equality rows, mu for cap rows (always
    nonnegative), eta for budget rows.  primal_objective and
    dual_objective let the gap be checked without re-solving.
    """

    program: str
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None
    eta: np.ndarray | None = None
    prices: np.ndarray | None = None
    primal_objective: float | None = None
    dual_objective: float | None = None


def dual_objective(program: DualProgramKind, inst: MarketInstance,
                   point: DualCertificate, costs=None,
                   feas_tol: float = 1e-9) -> float:
    """Evaluate sum_j p_j - sum_i B_i log(beta_i) after a feasibility check.

    EG requires p_j >= v_ij beta_i; the quasi-linear variant adds
    beta_i <= 1; the transaction-cost variant checks
    p_j + costs[i, j] >= v_ij beta_i together with beta_i <= 1.

    Note the returned value is the raw dual; comparing against a primal
    of the log-utility form needs the additive constant
    sum_i (B_i log B_i - B_i) added back.
    """
    if point.prices is None or point.beta is None:
        raise ValidationError("certificate needs prices and beta")
    p = np.asarray(point.prices, dtype=float)
    beta = np.asarray(point.beta, dtype=float)
    v = inst.values
    if costs is None:
        if program is DualProgramKind.TC:
            raise ValidationError("transaction-cost dual needs a cost matrix")
        costs = np.zeros_like(v)
    else:
        costs = np.asarray(costs, dtype=float)
    for i in range(inst.n):
        if not beta[i] > 0:
            raise DualInfeasible("beta[%d] must be positive" % i, index=i)
        if program in (DualProgramKind.QL, DualProgramKind.TC) and beta[i] > 1 + feas_tol:
            raise DualInfeasible("beta[%d] exceeds 1" % i, index=i)
        slack = p + costs[i] - v[i] * beta[i]
        j = int(np.argmin(slack))
        if slack[j] < -feas_tol:
            raise DualInfeasible(
                "price constraint violated at buyer %d good %d" % (i, j), index=(i, j))
    return float(p.sum() - float(inst.budgets @ np.log(beta)))


def reduced_dual(inst: MarketInstance, p) -> float:
    """sum_j p_j - sum_i B_i log(min_j p_j / v_ij), linear utilities."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise NonPositivePrice("all prices must be positive")
    total = float(p.sum())
    for i in range(inst.n):
        vi = inst.values[i]
        pos = vi > 0
        if not pos.any():
            raise ValidationError("buyer %d values nothing" % i)
        total -= float(inst.budgets[i]) * math.log(float(np.min(p[pos] / vi[pos])))
    return total


def excess_supply(inst: MarketInstance, p, tie_tol: float = 1e-12) -> np.ndarray:
    """Per-good 1 - demand when every buyer spends on her unique best good.

    This is the gradient of reduced_dual at p.  A bang-per-buck tie makes
    the gradient set-valued and raises SubgradientSet instead.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise NonPositivePrice("all prices must be positive")
    out = np.ones(inst.m)
    for i in range(inst.n):
        bpb = inst.values[i] / p
        best = float(bpb.max())
        if best <= 0:
            raise ValidationError("buyer %d values nothing" % i)
        near = np.nonzero(bpb >= best * (1.0 - tie_tol))[0]
        if near.size > 1:
            raise SubgradientSet("buyer %d has a bang-per-buck tie" % i)
        j = int(near[0])
        out[j] -= inst.budgets[i] / p[j]
    return out


def gibbs_spending(values) -> np.ndarray:
    """b_j proportional to v_j: the entropy-regularized optimum over the simplex.

    Maximizes sum_j (b_j log v_j - b_j log b_j); the attained value is
    log sum_j v_j.
    """
    v = np.asarray(values, dtype=float)
    s = v.sum()
    if not (v >= 0).all():
        raise ValidationError("values must be nonnegative")
    if s <= 0:
        raise AllZero("need at least one positive value")
    return v / s
