"""Model-specific equilibrium checks and the duality-gap evaluator.

check_equilibrium recomputes every equilibrium condition from scratch
and reports per-condition residuals; nothing here trusts solver state
beyond the returned point.  Residuals are absolute by default; the
relative flag rescales each comparison by max(1, |reference|).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, MissingCertificate, ValidationError
from .model import CES, Leontief, MarketInstance, ModelKind, SpendingConstraint
from .programs import ces_value

# spending below this is not a purchase; fixed so that reports are
# monotone in the check tolerance
_PURCHASE_EPS = 1e-12

# programs whose dual objective is exact versus those stated after
# dropping the per-buyer constant B_i log B_i - B_i
_EXACT_DUAL_PROGRAMS = {"shmyrev", "fsr", "p2"}
_SHIFTED_DUAL_PROGRAMS = {"eg", "ql", "tc", "p3", "p4", "p5"}


@dataclass
class CheckReport:
    model: str
    tol: float
    passed: bool
    mbb: float
    clearing: float
    budget: float
    cap: float
    ur: float
    segment_order: float
    duality: float | None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"model": self.model, "tol": self.tol, "pass": self.passed,
               "residuals": {"mbb": self.mbb, "clearing": self.clearing,
                             "budget": self.budget, "cap": self.cap,
                             "ur": self.ur, "segment_order": self.segment_order,
                             "duality": self.duality},
               "diagnostics": self.diagnostics}
        return out


def existence_condition(inst: MarketInstance) -> bool:
    """Whether an equilibrium exists: total caps cover total budgets.

    Binding only when spending caps are present; cap-free and
    utility-capped markets always clear.
    """
    if inst.has_spending_caps:
        return float(inst.spending_caps.sum()) >= float(inst.budgets.sum())
    return True


def duality_gap(inst: MarketInstance, eq) -> float:
    """dual objective - primal objective - normalization constant.

    Nonnegative up to rounding by weak duality; near zero exactly at an
    optimum.  The constant is sum_i (B_i - B_i log B_i) for programs
    stated in log-utility form and zero for the money-format programs.
    """
    cert = getattr(eq, "certificate", None)
    if cert is None or cert.primal_objective is None or cert.dual_objective is None:
        raise MissingCertificate("equilibrium carries no dual certificate")
    if cert.program in _EXACT_DUAL_PROGRAMS:
        constant = 0.0
    elif cert.program in _SHIFTED_DUAL_PROGRAMS:
        B = inst.budgets
        constant = float(np.sum(B - B * np.log(B)))
    else:
        raise ValidationError("unknown certificate program %r" % (cert.program,))
    return float(cert.dual_objective - cert.primal_objective - constant)


class _Residuals:
    def __init__(self, relative: bool):
        self.relative = relative

    def dev(self, a: float, b: float) -> float:
        """|a - b|, optionally scaled by max(1, |b|)."""
        d = abs(a - b)
        return d / max(1.0, abs(b)) if self.relative else d

    def over(self, a: float, bound: float) -> float:
        """Positive part of a - bound, optionally scaled."""
        d = max(0.0, a - bound)
        return d / max(1.0, abs(bound)) if self.relative else d


def _spending_matrix(eq) -> np.ndarray:
    sp = eq.spending
    return np.asarray(sp.b if hasattr(sp, "b") else sp, dtype=float)


def _linear_mbb(values, budgets, p, b, r: _Residuals, x=None) -> float:
    # a consumed free good is at the (infinite) top rate; spending money
    # while a valued good is free can never be bang-per-buck optimal
    worst = 0.0
    scale = max(1.0, float(budgets.max()))
    for i in range(values.shape[0]):
        with np.errstate(divide="ignore"):
            bpb = np.where(p > 0, values[i] / np.where(p > 0, p, 1.0),
                           np.where(values[i] > 0, np.inf, 0.0))
        alpha = float(bpb.max())
        taken = b[i] > _PURCHASE_EPS * scale
        if x is not None:
            taken = taken | ((x[i] > _PURCHASE_EPS) & (p <= 0))
        for j in range(values.shape[1]):
            if taken[j]:
                if bpb[j] == alpha:
                    continue
                if not math.isfinite(alpha):
                    return math.inf
                worst = max(worst, r.dev(float(bpb[j]), alpha))
    return worst


def _clearing(p, x, r: _Residuals, tol: float, caps=None) -> float:
    # a spending cap below the price restricts supply: only the
    # fraction c_j / p_j of the good is sold
    sold = x.sum(axis=0)
    worst = 0.0
    for j in range(p.shape[0]):
        if p[j] > tol:
            frac = 1.0
            if caps is not None and math.isfinite(caps[j]) and caps[j] < p[j]:
                frac = float(caps[j]) / float(p[j])
            worst = max(worst, r.dev(float(sold[j]), frac))
        else:
            worst = max(worst, r.over(float(sold[j]), 1.0))
    return worst


def _consistency(p, x, b, r: _Residuals) -> float:
    # x = b / p wherever p > 0
    worst = 0.0
    for j in range(p.shape[0]):
        if p[j] > 0:
            worst = max(worst, float(np.max(np.abs(x[:, j] * p[j] - b[:, j]))))
    return worst if not r.relative else worst / max(1.0, float(np.max(np.abs(b)) if b.size else 1.0))


def check_equilibrium(inst: MarketInstance, eq, model: ModelKind,
                      tol: float = 1e-6, relative: bool = False) -> CheckReport:
    """Evaluate the equilibrium conditions of the given model at eq.

    The report passes iff every residual (and the duality gap, when a
    certificate is attached) is at most tol.
    """
    p = np.asarray(eq.prices, dtype=float)
    x = np.asarray(eq.allocation, dtype=float)
    u = np.asarray(eq.utilities, dtype=float)
    b = _spending_matrix(eq)
    n, m = inst.n, inst.m
    if p.shape != (m,) or x.shape != (n, m) or u.shape != (n,) or b.shape != (n, m):
        raise DimensionMismatch("equilibrium shapes do not match the instance")
    r = _Residuals(relative)
    q = b.sum(axis=0)
    spend = b.sum(axis=1)
    diagnostics: dict = {}

    mbb = 0.0
    caps = inst.spending_caps if model in (ModelKind.SR, ModelKind.SC) else None
    clearing = _clearing(p, x, r, tol, caps)
    budget = 0.0
    cap = 0.0
    ur = 0.0
    segment_order = 0.0
    consistency = _consistency(p, x, b, r)

    if model in (ModelKind.FISHER, ModelKind.SR):
        mbb = _linear_mbb(inst.values, inst.budgets, p, b, r)
        budget = max(r.dev(float(spend[i]), float(inst.budgets[i])) for i in range(n))
        for i in range(n):
            consistency = max(consistency, r.dev(float(u[i]), float(inst.values[i] @ x[i])))
        if model is ModelKind.SR:
            for j in range(m):
                cap = max(cap, r.dev(float(q[j]), min(float(p[j]), float(inst.spending_caps[j]))))
        else:
            for j in range(m):
                cap = max(cap, r.dev(float(q[j]), float(p[j])))

    elif model is ModelKind.QL:
        w = inst.budgets - spend
        budget = max(r.over(float(spend[i]), float(inst.budgets[i])) for i in range(n))
        for i in range(n):
            with np.errstate(divide="ignore"):
                bpb = np.where(p > 0, inst.values[i] / np.where(p > 0, p, 1.0),
                               np.where(inst.values[i] > 0, np.inf, 0.0))
            alpha = max(1.0, float(bpb.max()))
            for j in range(m):
                if b[i, j] > _PURCHASE_EPS:
                    if not math.isfinite(alpha):
                        mbb = math.inf
                        break
                    mbb = max(mbb, r.dev(float(bpb[j]), alpha))
            if w[i] > tol:
                # leftover money means no good is strictly worth buying
                mbb = max(mbb, r.over(float(bpb.max()), 1.0))
            consistency = max(consistency, r.dev(
                float(u[i]), float(inst.values[i] @ x[i] + max(w[i], 0.0))))

    elif model is ModelKind.UR:
        budget = max(r.over(float(spend[i]), float(inst.budgets[i])) for i in range(n))
        for i in range(n):
            cap = max(cap, r.over(float(u[i]), float(inst.utility_caps[i])))
            slack_b = float(inst.budgets[i]) - float(spend[i])
            slack_d = float(inst.utility_caps[i]) - float(u[i])
            ur = max(ur, max(0.0, min(slack_b, slack_d))
                     / (max(1.0, inst.budgets[i]) if relative else 1.0))
        kind0 = inst.kinds[0]
        if isinstance(kind0, Leontief):
            for i in range(n):
                phi = np.asarray(inst.kinds[i].phi)
                mbb = max(mbb, float(np.max(np.abs(x[i] - u[i] * phi))))
        elif isinstance(kind0, CES):
            diagnostics["ces_note"] = (
                "verified via equalized marginal-utility-per-dollar ratios")
            for i in range(n):
                k = inst.kinds[i]
                w_ = np.asarray(k.weights)
                rho = k.rho
                best = 0.0
                rates = {}
                # rho near 0 puts utility units, and with them the whole
                # bundle, at extreme scales; zero-consumption detection
                # has to be relative to the buyer's own bundle
                thr = _PURCHASE_EPS * float(x[i].max(initial=0.0))
                spent_i = float(b[i].sum())
                for j in range(m):
                    if x[i, j] > thr:
                        rate = (u[i] ** (1.0 - rho)) * w_[j] * (x[i, j] ** (rho - 1.0))
                        if p[j] > 0:
                            rates[j] = rate / p[j]
                            best = max(best, rates[j])
                    elif w_[j] > 0 and rho < 1:
                        # zero consumption of a weighted good: infinite
                        # marginal utility per dollar at any finite price
                        mbb = math.inf
                for j, val in rates.items():
                    if b[i, j] > _PURCHASE_EPS * max(1.0, spent_i):
                        mbb = max(mbb, r.dev(val, best))
                consistency = max(consistency, r.dev(
                    float(u[i]), ces_value(w_, rho, x[i])))
        else:
            mbb = max(mbb, _linear_mbb(inst.values, inst.budgets, p, b, r, x=x))
            for i in range(n):
                consistency = max(consistency, r.dev(float(u[i]), float(inst.values[i] @ x[i])))

    elif model is ModelKind.SC:
        segs = eq.spending.segment_spend
        if segs is None:
            raise ValidationError("sc check needs per-segment spending")
        budget = max(r.dev(float(spend[i]), float(inst.budgets[i])) for i in range(n))
        for j in range(m):
            cap = max(cap, r.dev(float(q[j]), min(float(p[j]), float(inst.spending_caps[j]))))
        flat = []
        for i in range(n):
            for j, seg_list in enumerate(inst.kinds[i].segments):
                for l, seg in enumerate(seg_list):
                    flat.append((i, j, l, seg.rate, seg.length))
        segs = np.asarray(segs, dtype=float)
        if segs.shape != (len(flat),):
            raise DimensionMismatch("segment spending length mismatch")
        util = np.zeros(n)
        for i in range(n):
            mine = [(k, jj, rate, length) for k, (ii, jj, l, rate, length)
                    in enumerate(flat) if ii == i]
            open_rates = []
            for k, jj, rate, length in mine:
                if p[jj] > 0:
                    util[i] += rate * segs[k] / p[jj]
                if segs[k] < length - tol and p[jj] > 0:
                    open_rates.append(rate / p[jj])
            alpha = max(open_rates) if open_rates else None
            for k, jj, rate, length in mine:
                if p[jj] <= 0:
                    if segs[k] > _PURCHASE_EPS:
                        mbb = math.inf
                    continue
                ratio = rate / p[jj]
                if segs[k] >= length - tol:
                    if alpha is not None:
                        mbb = max(mbb, r.over(alpha, ratio))
                elif segs[k] > _PURCHASE_EPS:
                    mbb = max(mbb, r.dev(ratio, alpha))
            # money on a later segment while an earlier one has room
            per_good: dict = {}
            for k, jj, rate, length in mine:
                per_good.setdefault(jj, []).append((k, length))
            for jj, lst in per_good.items():
                for a in range(len(lst) - 1):
                    k, length = lst[a]
                    gap = max(0.0, length - segs[k])
                    later = max(segs[kk] for kk, _ in lst[a + 1:])
                    segment_order = max(segment_order, min(gap, later))
            consistency = max(consistency, r.dev(float(u[i]), float(util[i])))
    else:
        raise ValidationError("unknown model %r" % (model,))

    duality = None
    cert = getattr(eq, "certificate", None)
    if cert is not None and cert.primal_objective is not None \
            and cert.dual_objective is not None:
        duality = duality_gap(inst, eq)

    diagnostics["consistency"] = consistency
    residuals = [mbb, clearing, budget, cap, ur, segment_order, consistency]
    if duality is not None:
        residuals.append(abs(duality))
    passed = all(v <= tol for v in residuals)
    return CheckReport(model.value, tol, passed, mbb, clearing, budget, cap,
                       ur, segment_order, duality, diagnostics)
