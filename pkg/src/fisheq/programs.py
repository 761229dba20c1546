"""Convex program descriptions for each market model.

build_program turns a validated instance plus a model choice into an
explicit ProgramSpec: named variable blocks, a concave objective with
gradient, and the constraint rows of the corresponding program.  The
money-format programs carry spending variables; the utility-restricted
family carries allocations and utilities.

Constraint ids follow the source numbering: (5)-(8) for the capped
money program, (10)-(14) for the segmented one, (15)-(18), (20)-(23),
(25)-(28) for the utility-restricted family.  The uncapped money
program and the quasi-linear program use descriptive ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .errors import ModelMismatch, UnsupportedBuyer
from .model import (
    CES,
    Leontief,
    Linear,
    MarketInstance,
    ModelKind,
    QuasiLinear,
    SpendingConstraint,
    validate_instance,
)


class ProgramKind(Enum):
    SHMYREV = "shmyrev"
    FSR = "fsr"
    P2 = "p2"
    P3 = "p3"
    P4 = "p4"
    P5 = "p5"
    QL = "ql"


@dataclass(frozen=True)
class SegmentVar:
    """One segment variable of the segmented money program."""

    buyer: int
    good: int
    index: int
    rate: float
    length: float


@dataclass
class ConstraintRow:
    cid: str
    sense: str  # "eq" or "le" (residual <= 0 feasible)
    label: str
    residual: Callable[[dict], float]


@dataclass
class ProgramSpec:
    kind: ProgramKind
    inst: MarketInstance
    blocks: list  # (name, shape) pairs
    objective: Callable[[dict], float]
    gradient: Callable[[dict], dict]
    constraints: list = field(default_factory=list)
    segments: list = field(default_factory=list)  # SegmentVar, P2 only

    def max_violation(self, z: dict) -> float:
        worst = 0.0
        for row in self.constraints:
            r = row.residual(z)
            worst = max(worst, abs(r) if row.sense == "eq" else max(0.0, r))
        return worst


def _xlogx_sum(q: np.ndarray) -> float:
    pos = q > 0
    return float(np.sum(q[pos] * np.log(q[pos])))


def leontief_value(phi, x) -> float:
    phi = np.asarray(phi, dtype=float)
    x = np.asarray(x, dtype=float)
    need = phi > 0
    if not need.any():
        return 0.0
    return float(np.min(x[need] / phi[need]))


def ces_value(weights, rho: float, x) -> float:
    """(sum_j w_j x_j^rho)^(1/rho) computed in log-space."""
    w = np.asarray(weights, dtype=float)
    x = np.asarray(x, dtype=float)
    if rho < 0 and np.any(x <= 0):
        return 0.0
    pos = x > 0
    if not pos.any():
        return 0.0
    terms = np.log(w[pos]) + rho * np.log(x[pos])
    top = float(terms.max())
    lse = top + math.log(float(np.exp(terms - top).sum()))
    return math.exp(lse / rho)


def ces_unit_cost(weights, rho: float, p) -> float:
    """Minimal spending for one unit of utility at prices p (all positive)."""
    w = np.asarray(weights, dtype=float)
    p = np.asarray(p, dtype=float)
    s = 1.0 / (1.0 - rho)
    terms = s * np.log(w) + (1.0 - s) * np.log(p)
    top = float(terms.max())
    log_e_sum = top + math.log(float(np.exp(terms - top).sum()))
    return math.exp(log_e_sum / (1.0 - s))


def ces_spend_shares(weights, rho: float, p) -> np.ndarray:
    """Fraction of the wallet spent on each good by a CES cost minimizer."""
    w = np.asarray(weights, dtype=float)
    p = np.asarray(p, dtype=float)
    s = 1.0 / (1.0 - rho)
    terms = s * np.log(w) + (1.0 - s) * np.log(p)
    terms -= terms.max()
    e = np.exp(terms)
    return e / e.sum()


def _require_kind(inst: MarketInstance, want: type, model: ModelKind):
    for i, k in enumerate(inst.kinds):
        if not isinstance(k, want):
            raise ModelMismatch(
                "model %s needs %s utilities, buyer %d has %s"
                % (model.value, want.__name__, i, k.kind))


def _require_desire(inst: MarketInstance):
    desire = inst.desire_matrix()
    for i in range(inst.n):
        if not desire[i].any():
            raise UnsupportedBuyer("buyer %d values no good" % i)


def _money_rows(inst: MarketInstance, spec: ProgramSpec, capped: bool):
    n, m = inst.n, inst.m
    if capped:
        for j in range(m):
            spec.constraints.append(ConstraintRow(
                "(5)", "eq", "spending on good %d sums to q" % j,
                lambda z, j=j: float(z["b"][:, j].sum() - z["q"][j])))
    for i in range(n):
        cid = "(6)" if capped else "budget"
        spec.constraints.append(ConstraintRow(
            cid, "eq", "buyer %d spends the full budget" % i,
            lambda z, i=i: float(z["b"][i].sum() - inst.budgets[i])))
    if capped:
        for j in range(m):
            if math.isfinite(inst.spending_caps[j]):
                spec.constraints.append(ConstraintRow(
                    "(7)", "le", "good %d spending cap" % j,
                    lambda z, j=j: float(z["q"][j] - inst.spending_caps[j])))
    for i in range(n):
        for j in range(m):
            cid = "(8)" if capped else "nonneg"
            spec.constraints.append(ConstraintRow(
                cid, "le", "b[%d,%d] nonnegative" % (i, j),
                lambda z, i=i, j=j: float(-z["b"][i, j])))


def _build_money(inst: MarketInstance, capped: bool) -> ProgramSpec:
    v = inst.values
    logv = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), 0.0)
    valued = v > 0

    if capped:
        def objective(z):
            b, q = z["b"], z["q"]
            return float(np.sum(b[valued] * logv[valued]) - _xlogx_sum(q) + q.sum())

        def gradient(z):
            q = z["q"]
            return {"b": np.where(valued, logv, -np.inf),
                    "q": -np.log(np.maximum(q, 1e-300))}

        spec = ProgramSpec(ProgramKind.FSR, inst,
                           [("b", (inst.n, inst.m)), ("q", (inst.m,))],
                           objective, gradient)
    else:
        def objective(z):
            b = z["b"]
            q = b.sum(axis=0)
            return float(np.sum(b[valued] * logv[valued]) - _xlogx_sum(q) + q.sum())

        def gradient(z):
            q = z["b"].sum(axis=0)
            g = logv - np.log(np.maximum(q, 1e-300))[None, :]
            return {"b": np.where(valued, g, -np.inf)}

        spec = ProgramSpec(ProgramKind.SHMYREV, inst, [("b", (inst.n, inst.m))],
                           objective, gradient)
    _money_rows(inst, spec, capped)
    return spec


def _build_p2(inst: MarketInstance) -> ProgramSpec:
    segments = []
    for i, kind in enumerate(inst.kinds):
        for j, segs in enumerate(kind.segments):
            for l, seg in enumerate(segs):
                segments.append(SegmentVar(i, j, l, seg.rate, seg.length))
    log_rates = np.log(np.array([s.rate for s in segments]))

    def objective(z):
        bs, q = z["b_seg"], z["q"]
        return float(bs @ log_rates - _xlogx_sum(q) + q.sum())

    def gradient(z):
        return {"b_seg": log_rates.copy(),
                "q": -np.log(np.maximum(z["q"], 1e-300))}

    spec = ProgramSpec(ProgramKind.P2, inst,
                       [("b_seg", (len(segments),)), ("q", (inst.m,))],
                       objective, gradient, segments=segments)
    for j in range(inst.m):
        spec.constraints.append(ConstraintRow(
            "(10)", "eq", "segment spending on good %d sums to q" % j,
            lambda z, j=j: float(sum(z["b_seg"][k] for k, s in enumerate(segments)
                                     if s.good == j) - z["q"][j])))
    for i in range(inst.n):
        spec.constraints.append(ConstraintRow(
            "(11)", "eq", "buyer %d spends the full budget" % i,
            lambda z, i=i: float(sum(z["b_seg"][k] for k, s in enumerate(segments)
                                     if s.buyer == i) - inst.budgets[i])))
    for k, s in enumerate(segments):
        spec.constraints.append(ConstraintRow(
            "(12)", "le", "segment (%d,%d,%d) capacity" % (s.buyer, s.good, s.index),
            lambda z, k=k, s=s: float(z["b_seg"][k] - s.length)))
    for j in range(inst.m):
        if math.isfinite(inst.spending_caps[j]):
            spec.constraints.append(ConstraintRow(
                "(13)", "le", "good %d spending cap" % j,
                lambda z, j=j: float(z["q"][j] - inst.spending_caps[j])))
    for k, s in enumerate(segments):
        spec.constraints.append(ConstraintRow(
            "(14)", "le", "segment (%d,%d,%d) nonnegative" % (s.buyer, s.good, s.index),
            lambda z, k=k: float(-z["b_seg"][k])))
    return spec


def _log_utility_objective(inst):
    def objective(z):
        return float(inst.budgets @ np.log(z["u"]))

    def gradient(z):
        return {"x": np.zeros((inst.n, inst.m)), "u": inst.budgets / z["u"]}

    return objective, gradient


def _supply_rows(inst, spec, cid):
    for j in range(inst.m):
        spec.constraints.append(ConstraintRow(
            cid, "le", "good %d supply" % j,
            lambda z, j=j: float(z["x"][:, j].sum() - 1.0)))


def _cap_rows(inst, spec, cid):
    for i in range(inst.n):
        if math.isfinite(inst.utility_caps[i]):
            spec.constraints.append(ConstraintRow(
                cid, "le", "buyer %d utility cap" % i,
                lambda z, i=i: float(z["u"][i] - inst.utility_caps[i])))


def _nonneg_rows(inst, spec, cid):
    for i in range(inst.n):
        for j in range(inst.m):
            spec.constraints.append(ConstraintRow(
                cid, "le", "x[%d,%d] nonnegative" % (i, j),
                lambda z, i=i, j=j: float(-z["x"][i, j])))


def _build_p3(inst: MarketInstance) -> ProgramSpec:
    objective, gradient = _log_utility_objective(inst)
    spec = ProgramSpec(ProgramKind.P3, inst,
                       [("x", (inst.n, inst.m)), ("u", (inst.n,))],
                       objective, gradient)
    for i in range(inst.n):
        spec.constraints.append(ConstraintRow(
            "(15)", "eq", "buyer %d utility accounting" % i,
            lambda z, i=i: float(inst.values[i] @ z["x"][i] - z["u"][i])))
    _cap_rows(inst, spec, "(16)")
    _supply_rows(inst, spec, "(17)")
    _nonneg_rows(inst, spec, "(18)")
    return spec


def _build_p4(inst: MarketInstance) -> ProgramSpec:
    objective, gradient = _log_utility_objective(inst)
    spec = ProgramSpec(ProgramKind.P4, inst,
                       [("x", (inst.n, inst.m)), ("u", (inst.n,))],
                       objective, gradient)
    for i in range(inst.n):
        phi = inst.kinds[i].phi
        for j in range(inst.m):
            spec.constraints.append(ConstraintRow(
                "(20)", "eq", "buyer %d consumes good %d in proportion" % (i, j),
                lambda z, i=i, j=j, f=phi[j]: float(z["u"][i] * f - z["x"][i, j])))
    _cap_rows(inst, spec, "(21)")
    _supply_rows(inst, spec, "(22)")
    _nonneg_rows(inst, spec, "(23)")
    return spec


def _build_p5(inst: MarketInstance) -> ProgramSpec:
    objective, gradient = _log_utility_objective(inst)
    spec = ProgramSpec(ProgramKind.P5, inst,
                       [("x", (inst.n, inst.m)), ("u", (inst.n,))],
                       objective, gradient)
    for i, kind in enumerate(inst.kinds):
        spec.constraints.append(ConstraintRow(
            "(25)", "eq", "buyer %d utility accounting" % i,
            lambda z, i=i, k=kind: float(z["u"][i] - ces_value(k.weights, k.rho, z["x"][i]))))
    _cap_rows(inst, spec, "(26)")
    _supply_rows(inst, spec, "(27)")
    _nonneg_rows(inst, spec, "(28)")
    return spec


def _build_ql(inst: MarketInstance) -> ProgramSpec:
    def objective(z):
        u = (inst.values * z["x"]).sum(axis=1) + z["w"]
        return float(inst.budgets @ np.log(u) - z["w"].sum())

    def gradient(z):
        u = (inst.values * z["x"]).sum(axis=1) + z["w"]
        ratio = inst.budgets / u
        return {"x": ratio[:, None] * inst.values, "w": ratio - 1.0}

    spec = ProgramSpec(ProgramKind.QL, inst,
                       [("x", (inst.n, inst.m)), ("w", (inst.n,))],
                       objective, gradient)
    _supply_rows(inst, spec, "ql-supply")
    _nonneg_rows(inst, spec, "ql-nonneg-x")
    for i in range(inst.n):
        spec.constraints.append(ConstraintRow(
            "ql-nonneg-leftover", "le", "buyer %d leftover nonnegative" % i,
            lambda z, i=i: float(-z["w"][i])))
    return spec


def build_program(inst: MarketInstance, model: ModelKind) -> ProgramSpec:
    """Construct the convex program matching (instance, model).

    Raises ModelMismatch when the instance's utility kinds or caps do
    not fit the requested model: spending caps belong to SR/SC, utility
    caps to UR, and neither to plain Fisher or quasi-linear markets.
    """
    validate_instance(inst)
    if model is ModelKind.FISHER:
        _require_kind(inst, Linear, model)
        if inst.has_spending_caps or inst.has_utility_caps:
            raise ModelMismatch("fisher model takes no caps")
        _require_desire(inst)
        return _build_money(inst, capped=False)
    if model is ModelKind.SR:
        _require_kind(inst, Linear, model)
        if not inst.has_spending_caps:
            raise ModelMismatch("sr model needs spending caps")
        if inst.has_utility_caps:
            raise ModelMismatch("sr model takes no utility caps")
        _require_desire(inst)
        return _build_money(inst, capped=True)
    if model is ModelKind.SC:
        _require_kind(inst, SpendingConstraint, model)
        if not inst.has_spending_caps:
            raise ModelMismatch("sc model needs spending caps")
        if inst.has_utility_caps:
            raise ModelMismatch("sc model takes no utility caps")
        _require_desire(inst)
        return _build_p2(inst)
    if model is ModelKind.QL:
        _require_kind(inst, QuasiLinear, model)
        if inst.has_spending_caps or inst.has_utility_caps:
            raise ModelMismatch("ql model takes no caps")
        return _build_ql(inst)
    if model is ModelKind.UR:
        if not inst.has_utility_caps:
            raise ModelMismatch("ur model needs utility caps")
        if inst.has_spending_caps:
            raise ModelMismatch("ur model takes no spending caps")
        tags = {k.kind for k in inst.kinds}
        if len(tags) != 1:
            raise ModelMismatch("ur model needs one utility kind, got %s" % sorted(tags))
        tag = tags.pop()
        if tag == "linear":
            _require_desire(inst)
            return _build_p3(inst)
        if tag == "leontief":
            return _build_p4(inst)
        if tag == "ces":
            return _build_p5(inst)
        raise ModelMismatch("ur model supports linear, leontief, ces; got %s" % tag)
    raise ModelMismatch("unknown model %r" % (model,))
