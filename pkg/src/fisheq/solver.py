"""First-order solvers for the market programs, with exact polishing.

Each program is driven by a cheap globally-convergent iteration
(proportional response or mirror/projected ascent) until the active
structure stabilizes, then polished: the support, cap, and segment
sets are read off the iterate, prices and rates are solved exactly on
that structure (a log-linear gauge per connected component plus a
money-conservation scale), and spending is re-fit as the closest flow
matching all row and column totals.  The polished point is accepted
only if the full equilibrium check passes; otherwise the thresholds
are tightened and iteration continues.  Everything is deterministic
given (instance, options).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .duality import DualCertificate
from .errors import (
    DidNotConverge,
    Infeasible,
    InconsistentRates,
    ModelMismatch,
    ValidationError,
    ZeroUtility,
)
from .model import MarketInstance, ModelKind, SpendingProfile
from .programs import (
    ProgramKind,
    ProgramSpec,
    build_program,
    ces_spend_shares,
    ces_unit_cost,
    ces_value,
)
from .verify import check_equilibrium


class Method(Enum):
    AUTO = "auto"
    PROPORTIONAL_RESPONSE = "proportional_response"
    PROJECTED_FIRST_ORDER = "projected_first_order"


@dataclass
class SolveOptions:
    tolerance: float = 1e-8
    max_iterations: int = 200000
    seed: int = 0
    method: Method = Method.AUTO

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max iterations must be at least 1")


@dataclass
class Equilibrium:
    prices: np.ndarray
    allocation: np.ndarray
    utilities: np.ndarray
    spending: SpendingProfile
    certificate: DualCertificate | None = None
    iterations: int = 0
    residual: float = math.nan

    def to_json(self) -> dict:
        out = {"prices": [float(v) for v in self.prices],
               "allocation": [[float(v) for v in row] for row in self.allocation],
               "spending": [[float(v) for v in row] for row in self.spending.b],
               "utilities": [float(v) for v in self.utilities],
               "diagnostics": {"iterations": int(self.iterations),
                               "residual": float(self.residual)}}
        if self.spending.segment_spend is not None:
            out["segment_spending"] = [float(v) for v in self.spending.segment_spend]
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "Equilibrium":
        diag = doc.get("diagnostics", {})
        segs = doc.get("segment_spending")
        sp = SpendingProfile(np.asarray(doc["spending"], dtype=float),
                             None if segs is None else np.asarray(segs, dtype=float))
        return cls(np.asarray(doc["prices"], dtype=float),
                   np.asarray(doc["allocation"], dtype=float),
                   np.asarray(doc["utilities"], dtype=float),
                   sp, None,
                   int(diag.get("iterations", 0)),
                   float(diag.get("residual", math.nan)))


_THETA_LADDER = (1e-4, 1e-6, 1e-8)


# ---------------------------------------------------------------------------
# shared structure machinery


def _components(n: int, m: int, edges: list) -> list:
    """Connected components of the buyer/good bipartite support graph.

    Returns (buyer_ids, good_ids, edge_ids) triples; only nodes touched
    by an edge appear.
    """
    parent = list(range(n + m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (i, j) in edges:
        ra, rb = find(i), find(n + j)
        if ra != rb:
            parent[ra] = rb
    groups: dict = {}
    for e, (i, j) in enumerate(edges):
        root = find(i)
        g = groups.setdefault(root, (set(), set(), []))
        g[0].add(i)
        g[1].add(j)
        g[2].append(e)
    return [(sorted(b), sorted(g), eids) for b, g, eids in groups.values()]


def _gauge(n: int, m: int, edges: list, rhs: np.ndarray):
    """Least-squares node potentials: a_i + lp_j = rhs_e on each edge.

    a_i is the buyer's log bang-per-buck rate, lp_j the log price.
    Returns (a, lp, per_edge_residual); each connected component's
    potentials are determined only up to a shift, fixed later.
    """
    if not edges:
        return np.zeros(n), np.zeros(m), np.zeros(0)
    A = np.zeros((len(edges), n + m))
    for e, (i, j) in enumerate(edges):
        A[e, i] = 1.0
        A[e, n + j] = 1.0
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    res = A @ sol - rhs
    return sol[:n], sol[n:], res


def _exact_flow(edges: list, row_target: dict, col_target: dict,
                b_init: np.ndarray):
    """Closest-to-iterate edge flow meeting every row and column total.

    row_target maps buyer -> required sum (buyers absent are free);
    col_target maps good -> required sum.  Minimizes ||b - b_init||
    subject to the totals; returns None when the totals are mutually
    inconsistent on this support.
    """
    E = len(edges)
    rows = []
    rhs = []
    for i, t in row_target.items():
        coef = np.zeros(E)
        for e, (bi, _gj) in enumerate(edges):
            if bi == i:
                coef[e] = 1.0
        rows.append(coef)
        rhs.append(t)
    for j, t in col_target.items():
        coef = np.zeros(E)
        for e, (_bi, gj) in enumerate(edges):
            if gj == j:
                coef[e] = 1.0
        rows.append(coef)
        rhs.append(t)
    if not rows:
        return b_init.copy()
    A = np.array(rows)
    r = np.array(rhs)
    k = A.shape[0]
    M = np.zeros((E + k, E + k))
    M[:E, :E] = np.eye(E)
    M[:E, E:] = A.T
    M[E:, :E] = A
    vec = np.concatenate([b_init, r])
    sol, *_ = np.linalg.lstsq(M, vec, rcond=None)
    b = sol[:E]
    if np.max(np.abs(A @ b - r)) > 1e-8 * max(1.0, float(np.abs(r).max(initial=0.0))):
        return None
    return b


def _drop_worst_edge(edges, b_vals, bad_mask):
    """Remove the lowest-money edge among the flagged ones."""
    flagged = [e for e in range(len(edges)) if bad_mask[e]]
    victim = min(flagged, key=lambda e: b_vals[e])
    return [ed for e, ed in enumerate(edges) if e != victim]


def _max_residual(report) -> float:
    vals = [report.mbb, report.clearing, report.budget, report.cap,
            report.ur, report.segment_order,
            float(report.diagnostics.get("consistency", 0.0))]
    if report.duality is not None:
        vals.append(abs(report.duality))
    return float(max(vals))


def _routable_money(budgets: np.ndarray, pair_caps: dict, good_caps: np.ndarray) -> float:
    """Max money routable from budgets through valued edges into caps.

    pair_caps maps (buyer, good) to the edge capacity.  Equals the total
    budget exactly when a feasible spending profile exists; anything
    less certifies infeasibility via the saturated cut.
    """
    n, m = len(budgets), len(good_caps)
    total = float(budgets.sum())
    src, snk = n + m, n + m + 1
    cap: dict = {}

    def add(a, b, c):
        cap[(a, b)] = cap.get((a, b), 0.0) + c
        cap.setdefault((b, a), 0.0)

    for i in range(n):
        add(src, i, float(budgets[i]))
    for (i, j), c in pair_caps.items():
        add(i, n + j, min(float(c), total))
    for j in range(m):
        add(n + j, snk, min(float(good_caps[j]), total))
    out: dict = {}
    for (a, b) in cap:
        out.setdefault(a, []).append(b)
    flow = 0.0
    while True:
        parent = {src: src}
        queue = [src]
        while queue and snk not in parent:
            a = queue.pop(0)
            for b in out.get(a, []):
                if b not in parent and cap[(a, b)] > 1e-12:
                    parent[b] = a
                    queue.append(b)
        if snk not in parent:
            return flow
        aug = math.inf
        node = snk
        while node != src:
            aug = min(aug, cap[(parent[node], node)])
            node = parent[node]
        node = snk
        while node != src:
            cap[(parent[node], node)] -= aug
            cap[(node, parent[node])] += aug
            node = parent[node]
        flow += aug


# ---------------------------------------------------------------------------
# money programs: uncapped and capped spending


def proportional_response_step(inst: MarketInstance, sp: SpendingProfile) -> SpendingProfile:
    """One multiplicative-update step for the uncapped money program.

    b'_ij = B_i (v_ij x_ij) / u_i with x = b/q; row sums are preserved
    exactly.
    """
    b = np.asarray(sp.b, dtype=float)
    q = b.sum(axis=0)
    x = np.divide(b, q, out=np.zeros_like(b), where=q > 0)
    gain = inst.values * x
    u = gain.sum(axis=1)
    out = np.zeros_like(b)
    for i in range(inst.n):
        if u[i] <= 0:
            raise ZeroUtility("buyer %d has zero utility; nothing to respond to" % i)
        row = inst.budgets[i] * gain[i] / u[i]
        # pin the float row sum back to the budget exactly
        row[int(np.argmax(row))] += inst.budgets[i] - row.sum()
        out[i] = row
    return SpendingProfile(out)


def _uniform_money_init(inst: MarketInstance, rng, capped: bool) -> np.ndarray:
    v = inst.values
    total_b = float(inst.budgets.sum())
    w = np.minimum(inst.spending_caps, total_b) if capped else np.ones(inst.m)
    b = np.where(v > 0, w[None, :], 0.0)
    b = b * np.exp(0.08 * rng.standard_normal(b.shape))
    b = np.where(v > 0, b, 0.0)
    rowsum = b.sum(axis=1)
    return b * (inst.budgets / rowsum)[:, None]


def _pr_solve(budgets: np.ndarray, values: np.ndarray, b: np.ndarray,
              tol: float, max_it: int):
    """Proportional response to a fixed point on the given value matrix.

    Spending on valued goods is floored at a tiny fraction of the
    budget so an edge squeezed out in one regime can regrow after the
    caller shifts the values; multiplicative steps never recover from
    an exact zero on their own.  Stops on the bang-per-buck optimality
    ratio (tol is relative), never on iterate drift: an edge regrowing
    from the floor moves too little at first to register in a drift
    test, and halting there would freeze a non-equilibrium.
    """
    valued = values > 0
    floor = 1e-13 * budgets[:, None]
    it = 0
    for it in range(max_it):
        q = b.sum(axis=0)
        x = np.divide(b, q, out=np.zeros_like(b), where=q > 0)
        gain = values * x
        u = gain.sum(axis=1)
        b_new = budgets[:, None] * gain / u[:, None]
        b_new = np.where(valued, np.maximum(b_new, floor), 0.0)
        rowsum = b_new.sum(axis=1)
        b_new = b_new * (budgets / rowsum)[:, None]
        b = b_new
        qn = np.maximum(b.sum(axis=0), 1e-300)
        bpb = np.where(valued, values / qn[None, :], 0.0)
        un = (bpb * b).sum(axis=1)
        ratio = float(np.max(bpb.max(axis=1) * budgets / np.maximum(un, 1e-300)))
        if ratio - 1.0 < tol:
            break
    return b, it + 1


def _money_certificate(inst, program_tag, b, q, p, a, mu_goods):
    valued = inst.values > 0
    logv = np.log(np.where(valued, inst.values, 1.0))
    primal = float(np.sum(b[valued] * logv[valued]))
    qpos = q > 0
    primal -= float(np.sum(q[qpos] * np.log(q[qpos]))) - float(q.sum())
    dual = float(inst.budgets @ a) + float(q.sum())
    for j in range(inst.m):
        if math.isfinite(inst.spending_caps[j]) and mu_goods[j] > 0:
            dual += inst.spending_caps[j] * mu_goods[j]
    with np.errstate(divide="ignore"):
        lam = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -math.inf)
    return DualCertificate(program_tag, beta=np.exp(-a), gamma=a.copy(),
                           lam=lam, mu=mu_goods.copy(), eta=a.copy(),
                           prices=p.copy(), primal_objective=primal,
                           dual_objective=dual)


def shmyrev_certificate(inst: MarketInstance, sp: SpendingProfile) -> DualCertificate:
    """Certificate for any feasible uncapped spending profile.

    The dual point is built from the column sums, so its objective is
    an upper bound that matches the primal exactly at an optimum.
    """
    b = np.asarray(sp.b, dtype=float)
    q = b.sum(axis=0)
    a = np.full(inst.n, -math.inf)
    for i in range(inst.n):
        for j in range(inst.m):
            if inst.values[i, j] > 0 and q[j] > 0:
                a[i] = max(a[i], math.log(inst.values[i, j]) - math.log(q[j]))
    return _money_certificate(inst, "shmyrev", b, q, q.copy(), a, np.zeros(inst.m))


def _polish_money(inst: MarketInstance, b_it: np.ndarray, theta: float,
                  opts: SolveOptions, capped: bool, iterations: int):
    n, m = inst.n, inst.m
    B, v, c = inst.budgets, inst.values, inst.spending_caps
    scale = float(B.max())
    edges = [(i, j) for i in range(n) for j in range(m)
             if v[i, j] > 0 and b_it[i, j] > theta * scale]
    for i in range(n):
        if not any(e[0] == i for e in edges):
            j = int(np.argmax(np.where(v[i] > 0, b_it[i], -1.0)))
            if v[i, j] <= 0:
                return None
            edges.append((i, j))

    q_it = b_it.sum(axis=0)
    capped_set = {j for j in range(m)
                  if capped and math.isfinite(c[j])
                  and c[j] - q_it[j] <= math.sqrt(theta) * max(1.0, c[j])}

    for _ in range(len(edges) + 5):
        if not edges or len({e[0] for e in edges}) < n:
            return None
        rhs = np.array([math.log(v[i, j]) for (i, j) in edges])
        a_raw, lp_raw, res = _gauge(n, m, edges, rhs)
        b_vals = np.array([b_it[i, j] for (i, j) in edges])
        bad = np.abs(res) > 1e-7
        if bad.any():
            edges = _drop_worst_edge(edges, b_vals, bad)
            continue

        comps = _components(n, m, edges)
        a = a_raw.copy()
        lp = lp_raw.copy()
        ok = True
        for _round in range(2 * m + 2):
            ok = True
            fixed_buyers: set = set()
            fixed_goods: set = set()
            deferred = []
            for comp in comps:
                buyers, goods, _eids = comp
                unc = [j for j in goods if j not in capped_set]
                if not unc:
                    deferred.append(comp)
                    continue
                num = float(B[buyers].sum()) - sum(c[j] for j in goods if j in capped_set)
                den = float(np.exp(lp_raw[unc]).sum())
                if num <= 0 or den <= 0:
                    ok = False
                    break
                t = math.log(num / den)
                for i in buyers:
                    a[i] = a_raw[i] - t
                for j in goods:
                    lp[j] = lp_raw[j] + t
                fixed_buyers |= set(buyers)
                fixed_goods |= set(goods)
            if not ok:
                break
            for comp in deferred:
                buyers, goods, _eids = comp
                total_b = float(B[buyers].sum())
                total_c = sum(c[j] for j in goods)
                if abs(total_b - total_c) > 1e-7 * max(1.0, scale):
                    ok = False
                    break
                # minimal consistent scale: every cap multiplier stays
                # nonnegative and no outside buyer envies a comp good
                lo = max(math.log(c[j]) - lp_raw[j] for j in goods)
                hi = math.inf
                for j in goods:
                    for i_out in fixed_buyers:
                        if v[i_out, j] > 0:
                            lo = max(lo, math.log(v[i_out, j]) - a[i_out] - lp_raw[j])
                for i in buyers:
                    for j_out in fixed_goods:
                        if v[i, j_out] > 0:
                            hi = min(hi, a_raw[i] + lp[j_out] - math.log(v[i, j_out]))
                if lo > hi + 1e-9:
                    ok = False
                    break
                t = lo
                for i in buyers:
                    a[i] = a_raw[i] - t
                for j in goods:
                    lp[j] = lp_raw[j] + t
                fixed_buyers |= set(buyers)
                fixed_goods |= set(goods)
            if not ok:
                break
            changed = False
            supported = {j for _, j in edges}
            for j in supported:
                pj = math.exp(lp[j])
                if j in capped_set and pj < c[j] * (1 - 1e-12):
                    capped_set.discard(j)
                    changed = True
                elif (j not in capped_set and capped and math.isfinite(c[j])
                      and pj > c[j] * (1 + 1e-12)):
                    capped_set.add(j)
                    changed = True
            if not changed:
                break
        if not ok:
            return None

        supported = {j for _, j in edges}
        for j in range(m):
            if j not in supported and v[:, j].max() > 0:
                return None
        p = np.zeros(m)
        for j in supported:
            p[j] = math.exp(lp[j])
        col_target = {j: (c[j] if j in capped_set else p[j]) for j in supported}
        row_target = {i: float(B[i]) for i in range(n)}
        b_init = np.array([b_it[i, j] for (i, j) in edges])
        flow = _exact_flow(edges, row_target, col_target, b_init)
        if flow is None:
            return None
        if flow.min(initial=0.0) < -1e-11 * scale:
            edges = _drop_worst_edge(edges, flow, flow < -1e-11 * scale)
            continue
        b = np.zeros((n, m))
        for e, (i, j) in enumerate(edges):
            b[i, j] = max(flow[e], 0.0)
        q = b.sum(axis=0)
        mu_goods = np.zeros(m)
        for j in supported & capped_set:
            mu_goods[j] = max(0.0, lp[j] - math.log(c[j]))
        x = np.divide(b, p, out=np.zeros_like(b), where=p > 0)
        u = (v * x).sum(axis=1)
        cert = _money_certificate(inst, "fsr" if capped else "shmyrev",
                                  b, q, p, a, mu_goods)
        eq = Equilibrium(p, x, u, SpendingProfile(b), cert, iterations, math.nan)
        model = ModelKind.SR if capped else ModelKind.FISHER
        report = check_equilibrium(inst, eq, model, opts.tolerance)
        if report.passed:
            eq.residual = _max_residual(report)
            return eq
        return None
    return None


def _solve_money(inst: MarketInstance, opts: SolveOptions, capped: bool,
                 use_pr: bool) -> Equilibrium:
    if capped:
        return _solve_money_capped(inst, opts)
    attempts = 3
    per_attempt = max(500, opts.max_iterations // attempts)
    trace: list = []
    valued = inst.values > 0
    logv = np.log(np.where(valued, inst.values, 1.0))

    def objective(b):
        q = b.sum(axis=0)
        qpos = q > 0
        return (float(np.sum(b[valued] * logv[valued]))
                - float(np.sum(q[qpos] * np.log(q[qpos]))) + float(q.sum()))

    total_iters = 0
    for attempt in range(attempts):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        b = _uniform_money_init(inst, rng, False)
        gamma = 0.25
        f_cur = objective(b)
        next_polish = 40
        delta = math.inf
        for it in range(per_attempt):
            total_iters += 1
            stalled = delta < 1e-13 * float(inst.budgets.max())
            if it >= next_polish or stalled:
                next_polish = int(it * 1.6) + 40
                for theta in _THETA_LADDER:
                    eq = _polish_money(inst, b, theta, opts, False, total_iters)
                    if eq is not None:
                        return eq
                if stalled:
                    break
            if use_pr:
                b_new = proportional_response_step(inst, SpendingProfile(b)).b
            else:
                q = b.sum(axis=0)
                g = np.where(valued, logv - np.log(np.maximum(q, 1e-300))[None, :], 0.0)
                g_row = g - g.max(axis=1, keepdims=True)
                b_try = np.where(valued, b * np.exp(gamma * g_row), 0.0)
                rowsum = b_try.sum(axis=1)
                b_try = b_try * (inst.budgets / np.maximum(rowsum, 1e-300))[:, None]
                f_try = objective(b_try)
                if f_try < f_cur - 1e-12:
                    gamma = max(gamma * 0.5, 1e-4)
                    continue
                f_cur = f_try
                gamma = min(gamma * 1.1, 1.0)
                b_new = b_try
            delta = float(np.max(np.abs(b_new - b)))
            b = b_new
            if len(trace) < 50 and it % 50 == 0:
                trace.append(delta)
    raise DidNotConverge("money program did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": trace})


def _solve_money_capped(inst: MarketInstance, opts: SolveOptions) -> Equilibrium:
    """Cap multipliers by dual descent, inner uncapped response solves.

    The capped program's Lagrangian in the cap multipliers mu leaves an
    uncapped program over values v * exp(-mu); the outer objective
    h(mu) = inner optimum + sum mu * c is smooth and convex, minimized
    by damped multiplicative complementarity steps safeguarded with a
    revert-on-increase rule.  Column caps never enter a projection, so
    no spending edge can starve.
    """
    n, m = inst.n, inst.m
    B, v, c = inst.budgets, inst.values, inst.spending_caps
    total = float(B.sum())
    if float(c.sum()) < total - 1e-12:
        raise Infeasible("total spending caps %.6g cannot absorb total budgets %.6g"
                         % (float(c.sum()), total))
    pair_caps = {(i, j): total for i in range(n) for j in range(m) if v[i, j] > 0}
    if _routable_money(B, pair_caps, c) < total - 1e-9:
        raise Infeasible("spending caps on the valued goods cannot absorb "
                         "every budget")
    valued = v > 0
    logv = np.log(np.where(valued, v, 1.0))
    finite = np.isfinite(c)

    def h_value(b, mu):
        q = b.sum(axis=0)
        qpos = q > 0
        val = (float(np.sum(b[valued] * logv[valued])) - float(q @ mu)
               - float(np.sum(q[qpos] * np.log(q[qpos]))) + float(q.sum()))
        return val + float((mu[finite] * c[finite]).sum())

    total_iters = 0
    trace: list = []
    for attempt in range(3):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        b = _uniform_money_init(inst, rng, True)
        mu = np.zeros(m)
        eta = 0.5
        outer_budget = max(200, opts.max_iterations // 600)
        vt = np.where(valued, v * np.exp(-mu)[None, :], 0.0)
        b, inner_its = _pr_solve(B, vt, b, 1e-12, 3000)
        total_iters += inner_its
        h_cur = h_value(b, mu)
        for outer in range(outer_budget):
            q = b.sum(axis=0)
            with np.errstate(divide="ignore"):
                push = np.where(finite & (q > 0),
                                np.log(np.maximum(q, 1e-300) / np.where(finite, c, 1.0)),
                                np.where(finite, -mu, 0.0))
            push = np.clip(push, -50.0, 50.0)
            viol = float(np.max(np.abs(mu - np.maximum(0.0, mu + push)), initial=0.0))
            if len(trace) < 50:
                trace.append(viol)
            if viol < 1e-10 or outer % 15 == 14:
                for theta in _THETA_LADDER:
                    eq = _polish_money(inst, b, theta, opts, True, total_iters)
                    if eq is not None:
                        return eq
                if viol < 1e-12:
                    break
            # backtracking on the dual value: push descends h, so only a
            # step that actually lowers it is kept, which rules out the
            # overshoot cycles an unchecked multiplicative step falls into
            accepted = False
            for _bt in range(30):
                mu_try = np.maximum(0.0, mu + eta * push)
                b_try, inner_its = _pr_solve(B, np.where(valued, v * np.exp(-mu_try)[None, :], 0.0),
                                             b, 1e-12, 3000)
                total_iters += inner_its
                h_try = h_value(b_try, mu_try)
                if h_try <= h_cur + 1e-11 * max(1.0, abs(h_cur)):
                    accepted = True
                    break
                eta = max(eta * 0.5, 1e-9)
            if not accepted:
                break
            mu, b, h_cur = mu_try, b_try, h_try
            eta = min(eta * 1.3, 8.0)
        else:
            continue
        for theta in _THETA_LADDER:
            eq = _polish_money(inst, b, theta, opts, True, total_iters)
            if eq is not None:
                return eq
    raise DidNotConverge("money program did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": trace})


# ---------------------------------------------------------------------------
# price recovery from an optimal spending profile


def recover_prices(inst: MarketInstance, sp: SpendingProfile,
                   tol: float = 1e-6) -> np.ndarray:
    """Prices from optimal spending: p = q off caps, propagated rates on.

    Capped goods take p_j = max over their buyers of v_ij / alpha_i,
    with alpha fixed by incident uncapped goods; components made of
    capped goods only get the minimal scaling with min_j p_j/c_j = 1.
    """
    b = np.asarray(sp.b, dtype=float)
    q = b.sum(axis=0)
    n, m = inst.n, inst.m
    c = inst.spending_caps
    scale = max(1.0, float(inst.budgets.max()))
    is_capped = [math.isfinite(c[j]) and q[j] >= c[j] - tol * max(1.0, c[j])
                 for j in range(m)]
    p = np.full(m, math.nan)
    alpha = np.full(n, math.nan)
    for j in range(m):
        if not is_capped[j]:
            p[j] = q[j]
    support = [(i, j) for i in range(n) for j in range(m)
               if b[i, j] > 1e-12 * scale]
    for _ in range(n + m + 1):
        changed = False
        for (i, j) in support:
            if not math.isnan(p[j]) and p[j] > 0 and inst.values[i, j] > 0:
                cand = inst.values[i, j] / p[j]
                if math.isnan(alpha[i]):
                    alpha[i] = cand
                    changed = True
                elif abs(cand - alpha[i]) > tol * max(1.0, alpha[i]):
                    raise InconsistentRates(
                        "buyer %d rate disagrees across goods" % i)
        for j in range(m):
            if is_capped[j] and math.isnan(p[j]):
                cands = [inst.values[i, jj] / alpha[i] for (i, jj) in support
                         if jj == j and not math.isnan(alpha[i]) and alpha[i] > 0]
                if cands:
                    p[j] = max(cands)
                    changed = True
        if not changed:
            break
    # capped-only components remain: scale so the tightest cap ratio is 1
    remaining = [j for j in range(m) if math.isnan(p[j])]
    while remaining:
        seed = remaining[0]
        p_rel = {seed: c[seed]}
        a_rel: dict = {}
        frontier = True
        while frontier:
            frontier = False
            for (i, j) in support:
                if j in p_rel and i not in a_rel and inst.values[i, j] > 0:
                    a_rel[i] = inst.values[i, j] / p_rel[j]
                    frontier = True
            for (i, j) in support:
                if i in a_rel and j in remaining and j not in p_rel \
                        and inst.values[i, j] > 0:
                    p_rel[j] = inst.values[i, j] / a_rel[i]
                    frontier = True
        ratio = min(p_rel[j] / c[j] for j in p_rel)
        if ratio <= 0:
            raise InconsistentRates("cannot scale a capped component to its caps")
        for j, val in p_rel.items():
            p[j] = val / ratio
        remaining = [j for j in remaining if math.isnan(p[j])]
    return p


# ---------------------------------------------------------------------------
# segmented money program


def _p2_segments(inst: MarketInstance):
    segs = []
    for i in range(inst.n):
        for j, seg_list in enumerate(inst.kinds[i].segments):
            for l, seg in enumerate(seg_list):
                segs.append((i, j, l, seg.rate, seg.length))
    return segs


def _solve_p2(inst: MarketInstance, opts: SolveOptions) -> Equilibrium:
    if float(inst.spending_caps.sum()) < float(inst.budgets.sum()) - 1e-12:
        raise Infeasible("total spending caps cannot absorb total budgets")
    segs = _p2_segments(inst)
    K = len(segs)
    buyer_k = np.array([s[0] for s in segs])
    good_k = np.array([s[1] for s in segs])
    rate_k = np.array([s[3] for s in segs])
    len_k = np.array([s[4] for s in segs])
    for i in range(inst.n):
        capacity = float(len_k[buyer_k == i].sum())
        if capacity < inst.budgets[i] - 1e-12:
            raise DidNotConverge(
                "buyer %d budget %.6g exceeds segment capacity %.6g" %
                (i, float(inst.budgets[i]), capacity),
                diagnostics={"reason": "budget-exceeds-segment-capacity",
                             "buyer": i})
    pair_caps: dict = {}
    for (i, j, _l, _rate, length) in segs:
        pair_caps[(i, j)] = pair_caps.get((i, j), 0.0) + length
    if _routable_money(inst.budgets, pair_caps,
                       inst.spending_caps) < float(inst.budgets.sum()) - 1e-9:
        raise Infeasible("segment capacities and spending caps cannot absorb "
                         "every budget")
    log_rate = np.log(rate_k)
    scale = float(inst.budgets.max())

    def restore_rows(bb):
        # projection onto 0 <= b <= length with row sum = budget: scale
        # the positive part and clip, bisecting on the scale factor
        for i in range(inst.n):
            mask = buyer_k == i
            target = float(inst.budgets[i])
            caps = len_k[mask]
            base = np.maximum(bb[mask], 1e-12 * scale)
            hi_s = 2.0
            while float(np.minimum(base * hi_s, caps).sum()) < target and hi_s < 1e14:
                hi_s *= 2.0
            lo_s = 0.0
            for _ in range(60):
                mid = 0.5 * (lo_s + hi_s)
                if float(np.minimum(base * mid, caps).sum()) < target:
                    lo_s = mid
                else:
                    hi_s = mid
            bb[mask] = np.minimum(base * hi_s, caps)
        return bb

    def project(bb):
        return restore_rows(np.minimum(np.maximum(bb, 0.0), len_k))

    def inner_objective(bb, mu):
        q = np.zeros(inst.m)
        np.add.at(q, good_k, bb)
        qpos = q > 0
        return (float(bb @ (log_rate - mu[good_k]))
                - float(np.sum(q[qpos] * np.log(q[qpos]))) + float(q.sum()))

    def inner_opt_gap(bb, mu):
        # money should leave a held segment for any non-full segment with
        # a higher gradient; the largest such gain is the optimality gap
        q = np.zeros(inst.m)
        np.add.at(q, good_k, bb)
        g = (log_rate - mu[good_k]) - np.log(np.maximum(q, 1e-300))[good_k]
        worst = 0.0
        for i in range(inst.n):
            mask = buyer_k == i
            gi, bi, li = g[mask], bb[mask], len_k[mask]
            nonfull = bi < li * (1.0 - 1e-12)
            held = bi > 1e-9 * inst.budgets[i]
            if nonfull.any() and held.any():
                worst = max(worst, float(gi[nonfull].max() - gi[held].min()))
        return worst

    # each buyer's segments grouped by good, best rate first; a multiplier
    # shifts a whole good at once, so this order never changes
    buyer_groups: list = []
    for i in range(inst.n):
        groups: dict = {}
        for k in range(K):
            if buyer_k[k] == i:
                groups.setdefault(int(good_k[k]), []).append(k)
        for ks in groups.values():
            ks.sort(key=lambda k: -rate_k[k])
        buyer_groups.append(sorted(groups.items()))

    def best_response(i, q, bb, disc):
        # exact single-buyer optimum given everyone else's spending: a
        # segment is worth money while the good's total stays below its
        # threshold exp(disc - lam); bisect lam until the budget is spent
        groups = buyer_groups[i]
        other = {}
        for j, ks in groups:
            other[j] = max(0.0, q[j] - sum(bb[k] for k in ks))

        def fill(lam):
            spent = 0.0
            put = {}
            for j, ks in groups:
                tot = other[j]
                row = []
                for k in ks:
                    thr = math.exp(min(disc[k] - lam, 700.0))
                    if tot >= thr:
                        break
                    if tot + len_k[k] < thr:
                        row.append((k, len_k[k]))
                        tot += len_k[k]
                        continue
                    row.append((k, thr - tot))
                    tot = thr
                    break
                put[j] = row
                spent += tot - other[j]
            return spent, put

        lo = float(min(disc[k] for _j, ks in groups for k in ks)) - 64.0
        hi = float(max(disc[k] for _j, ks in groups for k in ks)) + 64.0
        target = float(inst.budgets[i])
        for _ in range(120):
            mid = 0.5 * (lo + hi)
            spent, _put = fill(mid)
            if spent >= target:
                lo = mid
            else:
                hi = mid
        _spent, put = fill(lo)
        moved = 0.0
        for j, ks in groups:
            new = dict(put[j])
            for k in ks:
                nk = new.get(k, 0.0)
                moved = max(moved, abs(nk - bb[k]))
                q[j] += nk - bb[k]
                bb[k] = nk
        return moved

    def solve_inner(bb, mu, max_it):
        # cyclic exact best responses; multiplicative updates were too slow
        # to regrow a near-empty segment under a small gradient gap, and the
        # value returned here feeds a line search that needs the true inner
        # optimum, not a drifted estimate
        bb = bb.copy()
        disc = log_rate - mu[good_k]
        q = np.zeros(inst.m)
        np.add.at(q, good_k, bb)
        rounds = max(40, min(400, max_it // max(1, inst.n)))
        its = 0
        for its in range(rounds):
            moved = 0.0
            for i in range(inst.n):
                moved = max(moved, best_response(i, q, bb, disc))
            if inner_opt_gap(bb, mu) < 1e-12 or moved < 1e-15 * scale:
                break
        return bb, inner_objective(bb, mu), its + 1

    finite = np.isfinite(inst.spending_caps)
    c = inst.spending_caps
    total_iters = 0
    trace: list = []
    for attempt in range(3):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        bb = len_k * np.exp(0.05 * rng.standard_normal(K))
        bb = project(bb)
        mu = np.zeros(inst.m)
        eta = 0.5
        bb, f_inner, its = solve_inner(bb, mu, 2000)
        total_iters += its
        h_cur = f_inner + float((mu[finite] * c[finite]).sum())
        for outer in range(max(200, opts.max_iterations // 600)):
            q = np.zeros(inst.m)
            np.add.at(q, good_k, bb)
            with np.errstate(divide="ignore"):
                push = np.where(finite & (q > 0),
                                np.log(np.maximum(q, 1e-300) / np.where(finite, c, 1.0)),
                                np.where(finite, -mu, 0.0))
            push = np.clip(push, -50.0, 50.0)
            viol = float(np.max(np.abs(mu - np.maximum(0.0, mu + push)), initial=0.0))
            if len(trace) < 50:
                trace.append(viol)
            if viol < 1e-10 or outer % 15 == 14:
                for theta in _THETA_LADDER:
                    eq = _polish_p2(inst, segs, bb, theta, opts, total_iters)
                    if eq is not None:
                        return eq
                if viol < 1e-12:
                    break
            # keep only multiplier steps that lower the dual value, so the
            # outer iteration cannot enter an overshoot cycle
            accepted = False
            for _bt in range(30):
                mu_try = np.maximum(0.0, mu + eta * push)
                bb_try, f_inner, its = solve_inner(bb, mu_try, 2000)
                total_iters += its
                h_try = f_inner + float((mu_try[finite] * c[finite]).sum())
                if h_try <= h_cur + 1e-11 * max(1.0, abs(h_cur)):
                    accepted = True
                    break
                eta = max(eta * 0.5, 1e-9)
            if not accepted:
                break
            mu, bb, h_cur = mu_try, bb_try, h_try
            eta = min(eta * 1.3, 8.0)
        else:
            continue
        for theta in _THETA_LADDER:
            eq = _polish_p2(inst, segs, bb, theta, opts, total_iters)
            if eq is not None:
                return eq
    raise DidNotConverge("segmented money program did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": trace})


def _polish_p2(inst: MarketInstance, segs, bb: np.ndarray, theta: float,
               opts: SolveOptions, iterations: int):
    n, m = inst.n, inst.m
    B, c = inst.budgets, inst.spending_caps
    scale = float(B.max())
    K = len(segs)

    # frontier classification per (buyer, good): full prefix, at most one
    # open segment, empty tail
    state = ["empty"] * K
    by_pair: dict = {}
    for k in range(K):
        by_pair.setdefault((segs[k][0], segs[k][1]), []).append(k)
    for _pair, ks in by_pair.items():
        opened = False
        for k in ks:
            length = segs[k][4]
            if not opened and bb[k] >= length - theta * scale:
                state[k] = "full"
            elif not opened and bb[k] > theta * scale:
                state[k] = "open"
                opened = True
            else:
                state[k] = "empty"

    open_ids = [k for k in range(K) if state[k] == "open"]
    open_edges = [(segs[k][0], segs[k][1]) for k in open_ids]
    for _ in range(K + 3):
        rhs = np.array([math.log(segs[k][3]) for k in open_ids])
        a_raw, lp_raw, res = _gauge(n, m, open_edges, rhs)
        if open_ids:
            bad = np.abs(res) > 1e-7
            if bad.any():
                b_vals = np.array([bb[k] for k in open_ids])
                victim_pos = min([e for e in range(len(open_ids)) if bad[e]],
                                 key=lambda e: b_vals[e])
                k = open_ids[victim_pos]
                state[k] = "full" if bb[k] > segs[k][4] / 2 else "empty"
                open_ids = [kk for kk in range(K) if state[kk] == "open"]
                open_edges = [(segs[kk][0], segs[kk][1]) for kk in open_ids]
                continue
        break

    full_money_by_good = np.zeros(m)
    full_money_by_buyer = np.zeros(n)
    for k in range(K):
        if state[k] == "full":
            full_money_by_good[segs[k][1]] += segs[k][4]
            full_money_by_buyer[segs[k][0]] += segs[k][4]

    q_it = np.zeros(m)
    for k in range(K):
        q_it[segs[k][1]] += bb[k]
    capped_set = {j for j in range(m) if math.isfinite(c[j])
                  and c[j] - q_it[j] <= math.sqrt(theta) * max(1.0, c[j])}

    comps = _components(n, m, open_edges)
    a = a_raw.copy()
    lp = lp_raw.copy()
    in_open = {e[0] for e in open_edges}
    goods_open = {e[1] for e in open_edges}
    for comp in comps:
        buyers, goods, _eids = comp
        unc = [j for j in goods if j not in capped_set]
        residual_money = (float(B[buyers].sum()) - float(full_money_by_buyer[buyers].sum())
                          + float(full_money_by_good[goods].sum()))
        if unc:
            num = residual_money - sum(c[j] for j in goods if j in capped_set)
            den = float(np.exp(lp_raw[unc]).sum())
            if num <= 0 or den <= 0:
                return None
            t = math.log(num / den)
        else:
            total_c = sum(c[j] for j in goods)
            if abs(residual_money - total_c) > 1e-7 * max(1.0, scale):
                return None
            t = max(math.log(c[j]) - lp_raw[j] for j in goods)
        for i in buyers:
            a[i] = a_raw[i] - t
        for j in goods:
            lp[j] = lp_raw[j] + t

    # prices for goods with no open incoming segment and rates for buyers
    # with no open segment interlock, so settle them by fixpoint
    p = np.zeros(m)
    for j in range(m):
        if j in goods_open:
            p[j] = math.exp(lp[j])
        elif j in capped_set:
            p[j] = c[j]
        else:
            p[j] = full_money_by_good[j]
    outside = [i for i in range(n) if i not in in_open]
    for i in outside:
        a[i] = math.nan
    for _ in range(n + m + 2):
        changed = False
        for i in outside:
            bounds = [math.log(segs[k][3]) - math.log(p[segs[k][1]])
                      for k in range(K)
                      if segs[k][0] == i and state[k] == "full" and p[segs[k][1]] > 0]
            if not bounds:
                return None
            cand = min(bounds)
            if math.isnan(a[i]) or cand < a[i] - 1e-15:
                a[i] = cand
                changed = True
        for j in range(m):
            if j in goods_open or j not in capped_set:
                continue
            lo = math.log(c[j]) if c[j] > 0 else -math.inf
            for k in range(K):
                ib = segs[k][0]
                if segs[k][1] == j and state[k] != "full" and not math.isnan(a[ib]):
                    lo = max(lo, math.log(segs[k][3]) - a[ib])
            if p[j] <= 0 or math.log(p[j]) < lo - 1e-15:
                p[j] = math.exp(lo)
                changed = True
        if not changed:
            break
    if any(math.isnan(a[i]) for i in outside):
        return None

    col_target = {}
    for j in goods_open:
        qj = c[j] if j in capped_set else p[j]
        col_target[j] = qj - full_money_by_good[j]
    row_target = {i: float(B[i] - full_money_by_buyer[i]) for i in in_open}
    b_init = np.array([bb[k] for k in open_ids])
    flow = _exact_flow(open_edges, row_target, col_target, b_init)
    if flow is None:
        return None
    seg_spend = np.zeros(K)
    for k in range(K):
        if state[k] == "full":
            seg_spend[k] = segs[k][4]
    for e, k in enumerate(open_ids):
        if flow[e] < -1e-11 * scale or flow[e] > segs[k][4] + 1e-11 * scale:
            return None
        seg_spend[k] = min(max(flow[e], 0.0), segs[k][4])
    for i in outside:
        if abs(full_money_by_buyer[i] - B[i]) > 1e-9 * scale:
            return None

    b = np.zeros((n, m))
    for k in range(K):
        b[segs[k][0], segs[k][1]] += seg_spend[k]
    q = b.sum(axis=0)
    mu_goods = np.zeros(m)
    for j in range(m):
        if j in capped_set and p[j] > 0 and c[j] > 0:
            mu_goods[j] = max(0.0, math.log(p[j]) - math.log(c[j]))
    x = np.divide(b, p, out=np.zeros_like(b), where=p > 0)
    u = np.zeros(n)
    for k in range(K):
        if p[segs[k][1]] > 0:
            u[segs[k][0]] += segs[k][3] * seg_spend[k] / p[segs[k][1]]
        elif seg_spend[k] > 0:
            return None

    rate_vec = np.array([s[3] for s in segs])
    primal = float(seg_spend @ np.log(rate_vec))
    qpos = q > 0
    primal -= float(np.sum(q[qpos] * np.log(q[qpos]))) - float(q.sum())
    dual = float(B @ a) + float(q.sum())
    for j in range(m):
        if math.isfinite(c[j]) and mu_goods[j] > 0:
            dual += c[j] * mu_goods[j]
    for k in range(K):
        if state[k] != "open" and p[segs[k][1]] > 0:
            # an empty segment with a positive margin is a misclassified
            # candidate; charging it here keeps the gap honest
            gam = math.log(segs[k][3]) - math.log(p[segs[k][1]]) - a[segs[k][0]]
            if gam > 0:
                dual += segs[k][4] * gam
    with np.errstate(divide="ignore"):
        lam = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -math.inf)
    cert = DualCertificate("p2", beta=np.exp(-a), gamma=a.copy(), lam=lam,
                           mu=mu_goods, eta=a.copy(), prices=p.copy(),
                           primal_objective=primal, dual_objective=dual)
    eq = Equilibrium(p, x, u, SpendingProfile(b, seg_spend), cert,
                     iterations, math.nan)
    report = check_equilibrium(inst, eq, ModelKind.SC, opts.tolerance)
    if report.passed:
        eq.residual = _max_residual(report)
        return eq
    return None


# ---------------------------------------------------------------------------
# utility-restricted programs


def _project_cap_simplex(col: np.ndarray, cap: float = 1.0) -> np.ndarray:
    y = np.maximum(col, 0.0)
    if y.sum() <= cap:
        return y
    srt = np.sort(y)[::-1]
    cssum = np.cumsum(srt)
    rho = 0
    for k in range(len(y)):
        if srt[k] - (cssum[k] - cap) / (k + 1) > 0:
            rho = k
    lam = (cssum[rho] - cap) / (rho + 1)
    return np.maximum(y - lam, 0.0)


def _solve_p3(inst: MarketInstance, opts: SolveOptions) -> Equilibrium:
    n, m = inst.n, inst.m
    v, B, d = inst.values, inst.budgets, inst.utility_caps
    valued = v > 0

    def project_col(col, j):
        # cap simplex restricted to the valued support of good j
        z = np.zeros(n)
        mask = valued[:, j]
        if mask.any():
            z[mask] = _project_cap_simplex(col[mask])
        return z

    def project(x, sweeps=400):
        # Dykstra's corrections make the alternating projections land on
        # the true nearest point; plain cycling stalls the ascent when
        # the supply and cap constraints interact
        x = np.where(valued, x, 0.0)
        pcol = np.zeros((n, m))
        prow = np.zeros((n, m))
        for _ in range(sweeps):
            moved = 0.0
            for j in range(m):
                y = x[:, j] + pcol[:, j]
                z = project_col(y, j)
                pcol[:, j] = y - z
                moved = max(moved, float(np.max(np.abs(z - x[:, j]))))
                x[:, j] = z
            for i in range(n):
                if math.isfinite(d[i]):
                    y = x[i] + prow[i]
                    ui = float(v[i] @ y)
                    if ui > d[i]:
                        z = y - v[i] * (ui - d[i]) / float(v[i] @ v[i])
                    else:
                        z = y
                    prow[i] = y - z
                    moved = max(moved, float(np.max(np.abs(z - x[i]))))
                    x[i] = z
            if moved < 1e-14:
                break
        for j in range(m):
            x[:, j] = project_col(x[:, j], j)
        x = np.maximum(x, 0.0)
        # a truncated pass can leave a cap slightly violated; scaling the
        # row onto its cap keeps the point feasible so a fake objective
        # gain can never enter the accept test
        u = (v * x).sum(axis=1)
        for i in range(n):
            if math.isfinite(d[i]) and u[i] > d[i] > 0:
                x[i] *= d[i] / u[i]
        return x

    def objective(x):
        u = (v * x).sum(axis=1)
        if (u <= 0).any():
            return -math.inf
        return float(B @ np.log(u))

    attempts = 3
    per_attempt = max(400, opts.max_iterations // (attempts * 8))
    total_iters = 0
    trace: list = []
    for attempt in range(attempts):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        x = np.where(valued, 1.0 / (2 * n), 0.0)
        x = x * np.exp(0.08 * rng.standard_normal(x.shape))
        x = project(x)
        step = 0.5
        f_cur = objective(x)
        next_polish = 30
        delta = math.inf
        for it in range(per_attempt):
            total_iters += 1
            stalled = delta < 1e-13
            if it >= next_polish or stalled:
                next_polish = int(it * 1.6) + 30
                for theta in _THETA_LADDER:
                    eq = _polish_p3(inst, x, theta, opts, total_iters)
                    if eq is not None:
                        return eq
                if stalled:
                    break
            u = (v * x).sum(axis=1)
            g = np.where(valued, (B / np.maximum(u, 1e-300))[:, None] * v, 0.0)
            x_try = project(x + step * g)
            f_try = objective(x_try)
            if f_try < f_cur - 1e-14:
                step = max(step * 0.5, 1e-7)
                continue
            delta = float(np.max(np.abs(x_try - x)))
            x = x_try
            f_cur = f_try
            step = min(step * 1.15, 2.0)
            if len(trace) < 50 and it % 50 == 0:
                trace.append(delta)
    raise DidNotConverge("capped linear market did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": trace})


def _free_side_allocation(v, d, zbuyers, fgoods, x_it):
    """Exact free-good consumption: u_i = d_i on zero-price goods.

    Minimizes deviation from the iterate subject to sum_j v_ij x_ij =
    d_i for every satiated buyer; negative entries trigger edge drops.
    Returns an (n, m)-shaped array filled only on the free block, or
    None when the caps cannot be met inside the supply.
    """
    fedges = [(i, j) for i in zbuyers for j in fgoods if v[i, j] > 0]
    for _ in range(len(fedges) + 1):
        if not fedges and zbuyers:
            return None
        E = len(fedges)
        A = np.zeros((len(zbuyers), E))
        for e, (i, j) in enumerate(fedges):
            A[zbuyers.index(i), e] = v[i, j]
        r = np.array([d[i] for i in zbuyers])
        M = np.zeros((E + len(zbuyers), E + len(zbuyers)))
        M[:E, :E] = np.eye(E)
        M[:E, E:] = A.T
        M[E:, :E] = A
        vec = np.concatenate([np.array([x_it[i, j] for (i, j) in fedges]), r])
        sol, *_ = np.linalg.lstsq(M, vec, rcond=None)
        xv = sol[:E]
        if np.max(np.abs(A @ xv - r), initial=0.0) > 1e-9 * max(1.0, float(r.max(initial=0.0))):
            return None
        if xv.min(initial=0.0) < -1e-11:
            worst = int(np.argmin(xv))
            fedges = [ed for e, ed in enumerate(fedges) if e != worst]
            continue
        out = np.zeros_like(x_it)
        for e, (i, j) in enumerate(fedges):
            out[i, j] = max(float(xv[e]), 0.0)
        if (out.sum(axis=0) > 1.0 + 1e-9).any():
            return None
        return out
    return None


def _polish_p3(inst: MarketInstance, x_it: np.ndarray, theta: float,
               opts: SolveOptions, iterations: int):
    n, m = inst.n, inst.m
    v, B, d = inst.values, inst.budgets, inst.utility_caps
    rt = math.sqrt(theta)
    sold = x_it.sum(axis=0)
    desired = [bool(v[:, j].max() > 0) for j in range(m)]
    # goods with slack supply are free; anyone valuing a free good is
    # satiated at zero marginal money value and buys nothing priced
    fgoods = {j for j in range(m) if desired[j] and sold[j] < 1.0 - rt}
    for _ in range(m + 2):
        zset = {i for i in range(n) if any(v[i, j] > 0 for j in fgoods)}
        if any(not math.isfinite(d[i]) for i in zset):
            return None
        grew = False
        for j in range(m):
            if j in fgoods or not desired[j]:
                continue
            if not any(v[i, j] > 0 for i in range(n) if i not in zset):
                fgoods.add(j)
                grew = True
        if not grew:
            break
    priced = [j for j in range(m) if desired[j] and j not in fgoods]
    zbuyers = sorted(zset)
    nz = [i for i in range(n) if i not in zset]

    edges = [(i, j) for i in nz for j in priced
             if v[i, j] > 0 and x_it[i, j] > theta]
    for i in nz:
        if not any(e[0] == i for e in edges):
            cand = [j for j in priced if v[i, j] > 0]
            if not cand:
                return None
            edges.append((i, max(cand, key=lambda jj: x_it[i, jj])))
    u_it = (v * x_it).sum(axis=1)

    for _ in range(len(edges) + 5):
        for j in priced:
            if not any(e[1] == j for e in edges):
                return None
        rhs = np.array([math.log(v[i, j]) for (i, j) in edges])
        a_raw, lp_raw, res = _gauge(n, m, edges, rhs)
        if edges:
            x_vals = np.array([x_it[i, j] for (i, j) in edges])
            bad = np.abs(res) > 1e-7
            if bad.any():
                edges = _drop_worst_edge(edges, x_vals, bad)
                continue
        comps = _components(n, m, edges)
        capped = {i for i in nz if math.isfinite(d[i])
                  and d[i] - u_it[i] <= rt * max(1.0, d[i])}
        a = a_raw.copy()
        lp = lp_raw.copy()
        ok = True
        for _round in range(2 * n + 2):
            ok = True
            fixed_buyers: set = set()
            fixed_goods: set = set()
            deferred = []
            for comp in comps:
                buyers, goods, _eids = comp
                unc = [i for i in buyers if i not in capped]
                if not unc:
                    deferred.append(comp)
                    continue
                # money balance: uncapped budgets + capped spending = prices
                num = float(B[unc].sum())
                den = (float(np.exp(lp_raw[goods]).sum())
                       - sum(math.exp(-a_raw[i]) * d[i]
                             for i in buyers if i in capped))
                if num <= 0 or den <= 0:
                    ok = False
                    break
                t = math.log(num / den)
                for i in buyers:
                    a[i] = a_raw[i] - t
                for j in goods:
                    lp[j] = lp_raw[j] + t
                fixed_buyers |= set(buyers)
                fixed_goods |= set(goods)
            if not ok:
                break
            for comp in deferred:
                buyers, goods, _eids = comp
                # all buyers capped: the largest consistent scale
                hi = math.inf
                lo = -math.inf
                for i in buyers:
                    hi = min(hi, math.log(B[i]) + a_raw[i] - math.log(d[i]))
                    for j_out in fixed_goods:
                        if v[i, j_out] > 0:
                            hi = min(hi, a_raw[i] + lp[j_out] - math.log(v[i, j_out]))
                for j in goods:
                    for i_out in fixed_buyers:
                        if v[i_out, j] > 0:
                            lo = max(lo, math.log(v[i_out, j]) - a[i_out] - lp_raw[j])
                if not math.isfinite(hi) or lo > hi + 1e-9:
                    ok = False
                    break
                t = hi
                for i in buyers:
                    a[i] = a_raw[i] - t
                for j in goods:
                    lp[j] = lp_raw[j] + t
                fixed_buyers |= set(buyers)
                fixed_goods |= set(goods)
            if not ok:
                break
            beta = np.exp(-a)
            changed = False
            for i in nz:
                if i in capped:
                    if B[i] / d[i] - beta[i] < -1e-12 * max(1.0, beta[i]):
                        capped.discard(i)
                        changed = True
                elif math.isfinite(d[i]) and B[i] / beta[i] > d[i] * (1 + 1e-12):
                    capped.add(i)
                    changed = True
            if not changed:
                break
        if not ok:
            return None

        supported = {j for _, j in edges}
        p = np.zeros(m)
        for j in supported:
            p[j] = math.exp(lp[j])
        beta = np.exp(-a)
        for i in zbuyers:
            beta[i] = 0.0
        row_target = {i: (float(beta[i] * d[i]) if i in capped else float(B[i]))
                      for i in nz}
        col_target = {j: float(p[j]) for j in supported}
        b_init = np.array([x_it[i, j] * p[j] for (i, j) in edges])
        flow = _exact_flow(edges, row_target, col_target, b_init)
        if flow is None:
            return None
        if len(edges) and flow.min(initial=0.0) < -1e-11:
            edges = _drop_worst_edge(edges, flow, flow < -1e-11)
            continue
        b = np.zeros((n, m))
        for e, (i, j) in enumerate(edges):
            b[i, j] = max(flow[e], 0.0)
        x = np.divide(b, p, out=np.zeros_like(b), where=p > 0)
        if zbuyers:
            x_free = _free_side_allocation(v, d, zbuyers, sorted(fgoods), x_it)
            if x_free is None:
                return None
            x = x + x_free
        u = (v * x).sum(axis=1)
        mu = np.zeros(n)
        for i in capped:
            mu[i] = max(0.0, B[i] / d[i] - beta[i])
        for i in zbuyers:
            mu[i] = B[i] / d[i]
        primal = float(B @ np.log(np.maximum(u, 1e-300)))
        dual = float(p.sum())
        for i in range(n):
            if mu[i] > 0:
                dual += mu[i] * d[i]
            dual -= B[i] * math.log(beta[i] + mu[i])
        cert = DualCertificate("p3", beta=beta, mu=mu, prices=p.copy(),
                               primal_objective=primal, dual_objective=dual)
        eq = Equilibrium(p, x, u, SpendingProfile(b), cert, iterations, math.nan)
        report = check_equilibrium(inst, eq, ModelKind.UR, opts.tolerance)
        if report.passed:
            eq.residual = _max_residual(report)
            return eq
        return None
    return None


def _solve_p4(inst: MarketInstance, opts: SolveOptions) -> Equilibrium:
    n, m = inst.n, inst.m
    B, d = inst.budgets, inst.utility_caps
    phi = np.array([inst.kinds[i].phi for i in range(n)], dtype=float)

    def project(u, sweeps=80):
        u = u.copy()
        pbox = np.zeros(n)
        pcol = np.zeros((m, n))
        for _ in range(sweeps):
            moved = 0.0
            y = u + pbox
            z = np.minimum(np.maximum(y, 1e-12), d)
            pbox = y - z
            moved = max(moved, float(np.max(np.abs(z - u))))
            u = z
            for j in range(m):
                y = u + pcol[j]
                load = float(phi[:, j] @ y)
                if load > 1.0:
                    z = y - phi[:, j] * (load - 1.0) / float(phi[:, j] @ phi[:, j])
                else:
                    z = y
                pcol[j] = y - z
                moved = max(moved, float(np.max(np.abs(z - u))))
                u = z
            if moved < 1e-14:
                break
        return np.minimum(np.maximum(u, 1e-12), d)

    def objective(u):
        return float(B @ np.log(u))

    total_iters = 0
    for attempt in range(3):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        u = np.ones(n)
        for i in range(n):
            lim = min(1.0 / (n * phi[i, j]) for j in range(m) if phi[i, j] > 0)
            u[i] = min(lim, d[i]) * 0.9
        u = u * np.exp(0.05 * rng.standard_normal(n))
        u = project(u)
        step = 0.2
        f_cur = objective(u)
        for it in range(4000):
            total_iters += 1
            g = B / u
            u_try = project(u + step * g)
            f_try = objective(u_try)
            if f_try < f_cur - 1e-14:
                step = max(step * 0.5, 1e-9)
                continue
            delta = float(np.max(np.abs(u_try - u)))
            u = u_try
            f_cur = f_try
            step = min(step * 1.15, 1.0)
            if delta < 1e-12 and it > 20:
                break
        for theta in _THETA_LADDER:
            eq = _polish_p4(inst, phi, u, theta, opts, total_iters)
            if eq is not None:
                return eq
    raise DidNotConverge("capped proportional market did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": []})


def _polish_p4(inst: MarketInstance, phi: np.ndarray, u_it: np.ndarray,
               theta: float, opts: SolveOptions, iterations: int):
    n, m = inst.n, inst.m
    B, d = inst.budgets, inst.utility_caps
    T = sorted(j for j in range(m) if 1.0 - float(phi[:, j] @ u_it) <= math.sqrt(theta))
    C = sorted(i for i in range(n) if math.isfinite(d[i])
               and d[i] - u_it[i] <= math.sqrt(theta) * max(1.0, d[i]))
    u = np.maximum(u_it.copy(), 1e-9)
    scale = max(1.0, float(B.max()))
    p_T = np.zeros(0)
    mu_C = np.zeros(0)

    for _adjust in range(30):
        tset, cset = list(T), list(C)
        nt, nc = len(tset), len(cset)

        def residual(z, tset=tset, cset=cset, nt=nt, nc=nc):
            uu = z[:n]
            pp = z[n:n + nt]
            mm = z[n + nt:]
            F = np.zeros(n + nt + nc)
            F[:n] = B / uu
            for idx, j in enumerate(tset):
                F[:n] -= phi[:, j] * pp[idx]
            for idx, i in enumerate(cset):
                F[i] -= mm[idx]
            for idx, j in enumerate(tset):
                F[n + idx] = float(phi[:, j] @ uu) - 1.0
            for idx, i in enumerate(cset):
                F[n + nt + idx] = uu[i] - d[i]
            return F

        if nt:
            p0, *_ = np.linalg.lstsq(phi[:, tset], B / u, rcond=None)
        else:
            p0 = np.zeros(0)
        z = np.concatenate([u, p0, np.zeros(nc)])
        for _newton in range(100):
            F = residual(z)
            base = float(np.max(np.abs(F)))
            if base <= 1e-13 * scale:
                break
            J = np.zeros((len(F), len(z)))
            uu = z[:n]
            J[:n, :n] = np.diag(-B / uu ** 2)
            for idx, j in enumerate(tset):
                J[:n, n + idx] = -phi[:, j]
                J[n + idx, :n] = phi[:, j]
            for idx, i in enumerate(cset):
                J[i, n + nt + idx] = -1.0
                J[n + nt + idx, i] = 1.0
            dz, *_ = np.linalg.lstsq(J, -F, rcond=None)
            lam = 1.0
            improved = False
            for _damp in range(40):
                z_try = z + lam * dz
                if np.all(z_try[:n] > 0):
                    if float(np.max(np.abs(residual(z_try)))) <= base * (1 - 1e-4) + 1e-16:
                        improved = True
                        break
                lam *= 0.5
            if not improved:
                break
            z = z + lam * dz
        if float(np.max(np.abs(residual(z)))) > 1e-10 * scale:
            return None
        u = z[:n]
        p_T = z[n:n + nt]
        mu_C = z[n + nt:]

        changed = False
        new_T, new_C = list(tset), list(cset)
        for idx, j in enumerate(tset):
            if p_T[idx] < -1e-10:
                new_T.remove(j)
                changed = True
        for idx, i in enumerate(cset):
            if mu_C[idx] < -1e-10:
                new_C.remove(i)
                changed = True
        if not changed:
            for j in range(m):
                if j not in tset and float(phi[:, j] @ u) > 1.0 + 1e-10:
                    new_T.append(j)
                    changed = True
            for i in range(n):
                if i not in cset and math.isfinite(d[i]) and u[i] > d[i] + 1e-10:
                    new_C.append(i)
                    changed = True
        if not changed:
            break
        T, C = sorted(new_T), sorted(new_C)
    else:
        return None

    p = np.zeros(m)
    for idx, j in enumerate(T):
        p[j] = max(0.0, float(p_T[idx]))
    x = u[:, None] * phi
    b = x * p[None, :]
    beta = phi @ p
    mu = np.zeros(n)
    for idx, i in enumerate(C):
        mu[i] = max(0.0, float(mu_C[idx]))
    primal = float(B @ np.log(u))
    dual = float(p.sum())
    for i in range(n):
        if mu[i] > 0:
            dual += mu[i] * d[i]
        dual -= B[i] * math.log(max(beta[i] + mu[i], 1e-300))
    cert = DualCertificate("p4", beta=beta, mu=mu, prices=p.copy(),
                           primal_objective=primal, dual_objective=dual)
    eq = Equilibrium(p, x, u.copy(), SpendingProfile(b), cert, iterations, math.nan)
    report = check_equilibrium(inst, eq, ModelKind.UR, opts.tolerance)
    if report.passed:
        eq.residual = _max_residual(report)
        return eq
    return None


def _p5_all_satiated(inst: MarketInstance, weights, rhos, opts: SolveOptions):
    """Zero-price equilibrium when the supply covers every utility cap.

    Follows the cheapest joint satiation direction: iterate prices toward
    equal per-good satiation demand, then scale each buyer's bundle to
    exactly d_i.  Returns None when the caps need more than the supply.
    """
    n, m = inst.n, inst.m
    B, d = inst.budgets, inst.utility_caps
    y = np.full(m, -math.log(m))
    iters = 0
    for _ in range(3000):
        iters += 1
        p = np.exp(y)
        s = np.zeros((n, m))
        for i in range(n):
            e = ces_unit_cost(weights[i], rhos[i], p)
            s[i] = d[i] * e * ces_spend_shares(weights[i], rhos[i], p)
        y_new = y + 0.3 * (np.log(np.maximum(s.sum(axis=0), 1e-300)) - y)
        y_new -= math.log(float(np.exp(y_new).sum()))
        moved = float(np.max(np.abs(y_new - y)))
        y = y_new
        if moved < 1e-14:
            break
    p = np.exp(y)
    x = np.zeros((n, m))
    for i in range(n):
        raw = ces_spend_shares(weights[i], rhos[i], p) / p
        val = ces_value(weights[i], rhos[i], raw)
        if not (val > 0 and math.isfinite(val)):
            return None
        x[i] = raw * (d[i] / val)
    over = float(x.sum(axis=0).max(initial=0.0))
    if over > 1.0 + 1e-10:
        return None
    x /= max(1.0, over)
    u = np.array([ces_value(weights[i], rhos[i], x[i]) for i in range(n)])
    beta = np.zeros(n)
    mu = B / u
    primal = float(B @ np.log(u))
    dual = float(mu @ d) - float(B @ np.log(mu))
    cert = DualCertificate("p5", beta=beta, mu=mu, prices=np.zeros(m),
                           primal_objective=primal, dual_objective=dual)
    eq = Equilibrium(np.zeros(m), x, u, SpendingProfile(np.zeros((n, m))),
                     cert, iters, math.nan)
    report = check_equilibrium(inst, eq, ModelKind.UR, opts.tolerance)
    if report.passed:
        eq.residual = _max_residual(report)
        return eq
    return None


def _solve_p5(inst: MarketInstance, opts: SolveOptions) -> Equilibrium:
    n, m = inst.n, inst.m
    B, d = inst.budgets, inst.utility_caps
    rhos = [inst.kinds[i].rho for i in range(n)]
    weights = [np.asarray(inst.kinds[i].weights, dtype=float) for i in range(n)]

    def market(y):
        p = np.exp(y)
        e = np.array([ces_unit_cost(weights[i], rhos[i], p) for i in range(n)])
        wallet = np.minimum(B, d * e)
        spend = np.zeros((n, m))
        for i in range(n):
            spend[i] = wallet[i] * ces_spend_shares(weights[i], rhos[i], p)
        return p, e, wallet, spend

    def excess(y):
        _p, _e, _w, spend = market(y)
        return spend.sum(axis=0) - np.exp(y)

    scale = max(1.0, float(B.sum()))
    total_iters = 0

    if bool(np.isfinite(d).all()):
        # when the supply can satiate every cap at once, all prices are
        # zero and nobody spends; positive weights rule out a partial
        # free set, so this branch and the priced one are exhaustive
        eq = _p5_all_satiated(inst, weights, rhos, opts)
        if eq is not None:
            return eq

    for attempt in range(4):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        y = np.log(np.full(m, float(B.sum()) / m)) + 0.1 * rng.standard_normal(m)
        for _ in range(300):
            total_iters += 1
            _p, _e, _w, spend = market(y)
            y = y + 0.3 * (np.log(np.maximum(spend.sum(axis=0), 1e-300)) - y)
        converged = False
        for _newton in range(80):
            total_iters += 1
            Z = excess(y)
            base = float(np.max(np.abs(Z)))
            if base <= 1e-13 * scale:
                converged = True
                break
            h = 1e-6
            J = np.zeros((m, m))
            for j in range(m):
                yp, ym = y.copy(), y.copy()
                yp[j] += h
                ym[j] -= h
                J[:, j] = (excess(yp) - excess(ym)) / (2 * h)
            _p, _e, wallet, _spend = market(y)
            if bool(np.all(wallet < B - 1e-12 * scale)):
                # prices only determined up to scale: pin the shift
                J = np.vstack([J, np.ones((1, m))])
                Zx = np.concatenate([Z, [0.0]])
            else:
                Zx = Z
            dy, *_ = np.linalg.lstsq(J, -Zx, rcond=None)
            lam = 1.0
            improved = False
            for _damp in range(40):
                y_try = y + lam * dy
                if float(np.max(np.abs(excess(y_try)))) <= base * (1 - 1e-4) + 1e-16:
                    improved = True
                    break
                lam *= 0.5
            if not improved:
                break
            y = y + lam * dy
        if not converged:
            continue
        p, e, wallet, spend = market(y)
        if bool(np.all(wallet < B - 1e-12 * scale)):
            # every buyer satiated: push prices up to the tightest budget
            t = float(np.min(B / wallet))
            y = y + math.log(t)
            p, e, wallet, spend = market(y)
        u = wallet / e
        x = spend / p[None, :]
        beta = e.copy()
        # uncapped buyers get mu = 0 exactly; B/u - beta can round to a
        # positive denormal and inf caps would poison the dual sum
        mu = np.where(np.isfinite(d), np.maximum(0.0, B / u - beta), 0.0)
        primal = float(B @ np.log(u))
        dual = float(p.sum())
        for i in range(n):
            if mu[i] > 0:
                dual += mu[i] * d[i]
            dual -= B[i] * math.log(beta[i] + mu[i])
        cert = DualCertificate("p5", beta=beta, mu=mu, prices=p.copy(),
                               primal_objective=primal, dual_objective=dual)
        eq = Equilibrium(p, x, u, SpendingProfile(spend), cert,
                         total_iters, math.nan)
        report = check_equilibrium(inst, eq, ModelKind.UR, opts.tolerance)
        if report.passed:
            eq.residual = _max_residual(report)
            return eq
    raise DidNotConverge("capped substitution market did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": []})


def _solve_ql(inst: MarketInstance, opts: SolveOptions) -> Equilibrium:
    n, m = inst.n, inst.m
    v, B = inst.values, inst.budgets
    valued = v > 0

    def project(x, w):
        for j in range(m):
            x[:, j] = _project_cap_simplex(x[:, j])
        return np.where(valued, x, 0.0), np.maximum(w, 0.0)

    def objective(x, w):
        u = (v * x).sum(axis=1) + w
        if (u <= 0).any():
            return -math.inf
        return float(B @ np.log(u)) - float(w.sum())

    attempts = 3
    per_attempt = max(400, opts.max_iterations // (attempts * 8))
    total_iters = 0
    trace: list = []
    for attempt in range(attempts):
        rng = np.random.default_rng(opts.seed + 101 * attempt)
        x = np.where(valued, 1.0 / (2 * n), 0.0)
        x = x * np.exp(0.08 * rng.standard_normal(x.shape))
        w = B.astype(float) / 2
        x, w = project(x, w)
        step = 0.3
        f_cur = objective(x, w)
        next_polish = 30
        delta = math.inf
        for it in range(per_attempt):
            total_iters += 1
            stalled = delta < 1e-13
            if it >= next_polish or stalled:
                next_polish = int(it * 1.6) + 30
                for theta in _THETA_LADDER:
                    eq = _polish_ql(inst, x, w, theta, opts, total_iters)
                    if eq is not None:
                        return eq
                if stalled:
                    break
            u = (v * x).sum(axis=1) + w
            ratio = B / np.maximum(u, 1e-300)
            gx = np.where(valued, ratio[:, None] * v, 0.0)
            gw = ratio - 1.0
            x_try, w_try = project(x + step * gx, w + step * gw)
            f_try = objective(x_try, w_try)
            if f_try < f_cur - 1e-14:
                step = max(step * 0.5, 1e-7)
                continue
            delta = max(float(np.max(np.abs(x_try - x))),
                        float(np.max(np.abs(w_try - w))))
            x, w = x_try, w_try
            f_cur = f_try
            step = min(step * 1.15, 2.0)
            if len(trace) < 50 and it % 50 == 0:
                trace.append(delta)
    raise DidNotConverge("quasi-linear market did not reach tolerance",
                         diagnostics={"iterations": total_iters,
                                      "residual": float("nan"), "trace": trace})


def _polish_ql(inst: MarketInstance, x_it: np.ndarray, w_it: np.ndarray,
               theta: float, opts: SolveOptions, iterations: int):
    n, m = inst.n, inst.m
    v, B = inst.values, inst.budgets
    scale = float(B.max())
    edges = [(i, j) for i in range(n) for j in range(m)
             if v[i, j] > 0 and x_it[i, j] > theta]
    keep_money = {i for i in range(n) if w_it[i] > theta * max(1.0, scale)}

    for _ in range(len(edges) + 5):
        rhs = np.array([math.log(v[i, j]) for (i, j) in edges])
        a_raw, lp_raw, res = _gauge(n, m, edges, rhs)
        if edges:
            x_vals = np.array([x_it[i, j] for (i, j) in edges])
            bad = np.abs(res) > 1e-7
            if bad.any():
                edges = _drop_worst_edge(edges, x_vals, bad)
                continue
        comps = _components(n, m, edges)
        a = a_raw.copy()
        lp = lp_raw.copy()
        ok = True
        for comp in comps:
            buyers, goods, _eids = comp
            anchors = [i for i in buyers if i in keep_money]
            if anchors:
                # leftover money means a unit rate: a_i = 0 on anchors
                t = a_raw[anchors[0]]
                for i in anchors[1:]:
                    if abs(a_raw[i] - t) > 1e-9:
                        ok = False
                        break
                if not ok:
                    break
            else:
                num = float(B[buyers].sum())
                den = float(np.exp(lp_raw[goods]).sum())
                if num <= 0 or den <= 0:
                    ok = False
                    break
                t = math.log(num / den)
            for i in buyers:
                a[i] = a_raw[i] - t
            for j in goods:
                lp[j] = lp_raw[j] + t
        if not ok:
            return None
        supported = {j for _, j in edges}
        for j in range(m):
            if j not in supported and v[:, j].max() > 0:
                return None
        p = np.zeros(m)
        for j in supported:
            p[j] = math.exp(lp[j])
        beta = np.exp(-a)
        in_graph = {e[0] for e in edges}
        for i in range(n):
            if i not in in_graph:
                beta[i] = 1.0
                a[i] = 0.0
        if (beta > 1 + 1e-9).any():
            return None
        row_target = {i: float(B[i]) for i in in_graph if i not in keep_money}
        col_target = {j: float(p[j]) for j in supported}
        b_init = np.array([x_it[i, j] * p[j] for (i, j) in edges])
        flow = _exact_flow(edges, row_target, col_target, b_init)
        if flow is None:
            return None
        if len(edges) and flow.min(initial=0.0) < -1e-11 * scale:
            edges = _drop_worst_edge(edges, flow, flow < -1e-11 * scale)
            continue
        b = np.zeros((n, m))
        for e, (i, j) in enumerate(edges):
            b[i, j] = max(flow[e], 0.0)
        spend = b.sum(axis=1)
        if (spend > B + 1e-9 * scale).any():
            return None
        w = np.maximum(B - spend, 0.0)
        for i in in_graph:
            if i not in keep_money:
                w[i] = 0.0
        x = np.divide(b, p, out=np.zeros_like(b), where=p > 0)
        u = (v * x).sum(axis=1) + w
        primal = float(B @ np.log(np.maximum(u, 1e-300))) - float(w.sum())
        beta_c = np.minimum(beta, 1.0)
        dual = float(p.sum()) - float(B @ np.log(beta_c))
        cert = DualCertificate("ql", beta=beta_c, prices=p.copy(),
                               primal_objective=primal, dual_objective=dual)
        eq = Equilibrium(p, x, u, SpendingProfile(b), cert, iterations, math.nan)
        report = check_equilibrium(inst, eq, ModelKind.QL, opts.tolerance)
        if report.passed:
            eq.residual = _max_residual(report)
            return eq
        return None
    return None


# ---------------------------------------------------------------------------
# entry points


def maximize(spec: ProgramSpec, opts: SolveOptions | None = None) -> Equilibrium:
    """Solve the program to a verified equilibrium of its market model."""
    opts = opts or SolveOptions()
    inst = spec.inst
    if opts.method is Method.PROPORTIONAL_RESPONSE and spec.kind is not ProgramKind.SHMYREV:
        raise ModelMismatch("proportional response applies only to the plain money program")
    if spec.kind is ProgramKind.SHMYREV:
        use_pr = opts.method in (Method.AUTO, Method.PROPORTIONAL_RESPONSE)
        return _solve_money(inst, opts, capped=False, use_pr=use_pr)
    if spec.kind is ProgramKind.FSR:
        return _solve_money(inst, opts, capped=True, use_pr=False)
    if spec.kind is ProgramKind.P2:
        return _solve_p2(inst, opts)
    if spec.kind is ProgramKind.P3:
        return _solve_p3(inst, opts)
    if spec.kind is ProgramKind.P4:
        return _solve_p4(inst, opts)
    if spec.kind is ProgramKind.P5:
        return _solve_p5(inst, opts)
    if spec.kind is ProgramKind.QL:
        return _solve_ql(inst, opts)
    raise ModelMismatch("unknown program kind %r" % (spec.kind,))


def solve(inst: MarketInstance, model: ModelKind,
          opts: SolveOptions | None = None) -> Equilibrium:
    return maximize(build_program(inst, model), opts)
