"""Exact rational equilibria recovered from numeric solutions.

A converged numeric equilibrium fixes a combinatorial skeleton: which
goods each buyer spends on, which caps bind, and (for segmented rate
functions) which segments are full, partial, or untouched.  Holding
that skeleton fixed, the equilibrium conditions become a linear system
with rational coefficients plus a handful of inequalities, so the
equilibrium can be re-solved exactly.  Everything past detection runs
on Fraction arithmetic; floats appear only at the thresholding
boundary and in the instance parameters themselves (every float is a
dyadic rational, converted losslessly).

Scope: linear utilities (plain, spending-capped, utility-capped) and
spending-constraint utilities.  Leontief and CES equilibria can be
irrational and are rejected up front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    AmbiguousSupport,
    DegenerateSupport,
    DimensionMismatch,
    IrrationalParameters,
    ModelMismatch,
    ValidationError,
)
from .model import MarketInstance, ModelKind


def _frac(x, what: str) -> Fraction:
    x = float(x)
    if not math.isfinite(x):
        raise IrrationalParameters("%s is not a finite rational" % what)
    return Fraction(x)


def _fstr(f: Fraction) -> str:
    return "%d/%d" % (f.numerator, f.denominator)


def _infer_model(inst: MarketInstance) -> ModelKind:
    tags = {k.kind for k in inst.kinds}
    if tags == {"spending_constraint"}:
        return ModelKind.SC
    if tags != {"linear"}:
        raise ModelMismatch(
            "exact extraction covers linear and spending-constraint utilities"
        )
    if inst.has_utility_caps:
        return ModelKind.UR
    if inst.has_spending_caps:
        return ModelKind.SR
    return ModelKind.FISHER


@dataclass(frozen=True)
class SupportStructure:
    """Combinatorial skeleton of an equilibrium.

    purchases[i] is the set of goods buyer i spends on.  binding holds
    the goods whose spending cap is met (capped-seller models) or the
    buyers whose utility cap is met (capped-utility model).  For the
    segmented model, segment_states[i][j][l] is "+", "0" or "-" for a
    full, partially filled, or untouched segment.  The per-buyer rate
    scalars alpha_i are unknowns of the induced system, not data.
    """

    model: ModelKind
    purchases: tuple[frozenset, ...]
    binding: frozenset
    segment_states: tuple | None = None


@dataclass(frozen=True)
class RationalEquilibrium:
    """Equilibrium values as exact fractions.

    spending is the full n-by-m grid; segment_spending mirrors it per
    segment for spending-constraint instances and is None otherwise.
    """

    prices: tuple
    spending: tuple
    alphas: tuple
    segment_spending: tuple | None = None

    def to_json(self) -> dict:
        doc = {
            "prices": [_fstr(p) for p in self.prices],
            "spending": [[_fstr(x) for x in row] for row in self.spending],
            "alphas": [_fstr(a) for a in self.alphas],
        }
        if self.segment_spending is not None:
            doc["segment_spending"] = [
                [[_fstr(s) for s in segs] for segs in row]
                for row in self.segment_spending
            ]
        return doc

    @staticmethod
    def from_json(doc: dict) -> "RationalEquilibrium":
        seg = None
        if "segment_spending" in doc:
            seg = tuple(
                tuple(tuple(Fraction(s) for s in segs) for segs in row)
                for row in doc["segment_spending"]
            )
        return RationalEquilibrium(
            prices=tuple(Fraction(s) for s in doc["prices"]),
            spending=tuple(
                tuple(Fraction(s) for s in row) for row in doc["spending"]
            ),
            alphas=tuple(Fraction(s) for s in doc["alphas"]),
            segment_spending=seg,
        )


def detect_support(eq, inst: MarketInstance, tol: float = 1e-8) -> SupportStructure:
    """Threshold a numeric equilibrium into a SupportStructure.

    Raises AmbiguousSupport when an entry sits within tol of two
    classifications at once (a segment near both empty and full); the
    caller should re-solve at a tighter tolerance.
    """
    model = _infer_model(inst)
    b = eq.spending.b
    if b.shape != (inst.n, inst.m):
        raise DimensionMismatch(
            "spending is %s, expected %s" % (b.shape, (inst.n, inst.m))
        )

    segment_states = None
    if model is ModelKind.SC:
        if eq.spending.segment_spend is None:
            raise ValidationError("segmented extraction needs segment spending")
        # flat array in (buyer, good, segment) order, same as the solver emits
        spent_flat = np.asarray(eq.spending.segment_spend, dtype=float)
        total = sum(len(col) for k in inst.kinds for col in k.segments)
        if spent_flat.shape != (total,):
            raise DimensionMismatch("segment spending length mismatch")
        states = []
        cursor = 0
        for i in range(inst.n):
            per_good = []
            for j in range(inst.m):
                col = []
                for l, seg in enumerate(inst.kinds[i].segments[j]):
                    s = float(spent_flat[cursor])
                    cursor += 1
                    near_zero = s <= tol
                    near_full = seg.length - s <= tol
                    if near_zero and near_full:
                        raise AmbiguousSupport(
                            "segment (%d, %d, %d) is within %g of both empty and full"
                            % (i, j, l, tol)
                        )
                    col.append("-" if near_zero else "+" if near_full else "0")
                per_good.append(tuple(col))
            states.append(tuple(per_good))
        segment_states = tuple(states)
        purchases = tuple(
            frozenset(
                j
                for j in range(inst.m)
                if any(st != "-" for st in segment_states[i][j])
            )
            for i in range(inst.n)
        )
    else:
        purchases = tuple(
            frozenset(j for j in range(inst.m) if b[i, j] > tol)
            for i in range(inst.n)
        )

    if model in (ModelKind.SR, ModelKind.SC):
        q = b.sum(axis=0)
        binding = frozenset(
            j
            for j in range(inst.m)
            if math.isfinite(inst.spending_caps[j])
            and abs(q[j] - inst.spending_caps[j]) <= tol
        )
    elif model is ModelKind.UR:
        binding = frozenset(
            i
            for i in range(inst.n)
            if math.isfinite(inst.utility_caps[i])
            and abs(float(eq.utilities[i]) - inst.utility_caps[i]) <= tol
        )
    else:
        binding = frozenset()
    return SupportStructure(
        model=model,
        purchases=purchases,
        binding=binding,
        segment_states=segment_states,
    )


def _rref(rows: list, ncols: int) -> dict:
    """In-place reduced row echelon form over Fractions.

    rows are augmented (length ncols + 1).  Pivot rows are chosen by
    largest numerator magnitude, a deterministic stand-in for numeric
    partial pivoting.  Returns {column: pivot row}.  Raises
    DegenerateSupport when the system is inconsistent.
    """
    pivots: dict = {}
    r = 0
    for c in range(ncols):
        best = None
        best_key = None
        for k in range(r, len(rows)):
            e = rows[k][c]
            if e != 0:
                key = abs(e.numerator)
                if best is None or key > best_key:
                    best, best_key = k, key
        if best is None:
            continue
        rows[r], rows[best] = rows[best], rows[r]
        inv = rows[r][c]
        rows[r] = [x / inv for x in rows[r]]
        piv = rows[r]
        for k in range(len(rows)):
            f = rows[k][c]
            if k != r and f != 0:
                rows[k] = [a - f * p for a, p in zip(rows[k], piv)]
        pivots[c] = r
        r += 1
        if r == len(rows):
            break
    for k in range(r, len(rows)):
        if rows[k][ncols] != 0:
            raise DegenerateSupport(
                "equality subsystem is inconsistent for the claimed support"
            )
    return pivots


class _Skeleton:
    """Instance parameters and support re-expressed over Fractions."""

    def __init__(self, inst: MarketInstance, support: SupportStructure):
        if len(support.purchases) != inst.n:
            raise DimensionMismatch("support covers %d buyers, instance has %d"
                                    % (len(support.purchases), inst.n))
        model = _infer_model(inst)
        if support.model is not model:
            raise ModelMismatch(
                "support was detected for %s, instance is %s"
                % (support.model.value, model.value)
            )
        self.model = model
        self.n, self.m = inst.n, inst.m
        self.budgets = [_frac(x, "budget") for x in inst.budgets]
        self.caps = [
            None if c == math.inf else _frac(c, "spending cap")
            for c in inst.spending_caps
        ]
        self.dcaps = [
            None if d == math.inf else _frac(d, "utility cap")
            for d in inst.utility_caps
        ]
        if model is ModelKind.SC:
            self.values = None
            self.segs = []  # (i, j, l, rate, length, state)
            for i in range(inst.n):
                kind = inst.kinds[i]
                for j in range(inst.m):
                    for l, seg in enumerate(kind.segments[j]):
                        self.segs.append(
                            (
                                i,
                                j,
                                l,
                                _frac(seg.rate, "segment rate"),
                                _frac(seg.length, "segment length"),
                                support.segment_states[i][j][l],
                            )
                        )
        else:
            self.values = [
                [_frac(v, "valuation") for v in row] for row in inst.values
            ]
            self.segs = None
        self.purchases = support.purchases
        self.binding = support.binding
        self.sold = frozenset(j for A in support.purchases for j in A)

    def mbb_edges(self):
        """Pairs (i, j) coupled by a rate equality."""
        if self.model is ModelKind.SC:
            return sorted({(s[0], s[1]) for s in self.segs if s[5] == "0"})
        return sorted(
            (i, j) for i in range(self.n) for j in self.purchases[i]
        )


def _components(n: int, m: int, edges) -> list:
    """Connected components of the buyer-good graph; each is
    (set of buyers, set of goods)."""
    parent = list(range(n + m))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        a, b = find(i), find(n + j)
        if a != b:
            parent[a] = b
    comps: dict = {}
    for i in range(n):
        comps.setdefault(find(i), [set(), set()])[0].add(i)
    for j in range(m):
        comps.setdefault(find(n + j), [set(), set()])[1].add(j)
    return [tuple(c) for c in comps.values()]


def exact_equilibrium(inst: MarketInstance, support: SupportStructure) -> RationalEquilibrium:
    """Solve the support's equality system exactly and certify the rest.

    The unknowns are prices, per-buyer rate scalars alpha, and the
    supported spending entries.  Equalities are eliminated over
    Fractions; leftover freedom is fixed deterministically: component
    price scales are pushed to their smallest feasible value (largest
    for all-capped utility components, where budgets bound the scale
    from above), unpinned prices and alphas to their largest exact
    lower bound.  Raises DegenerateSupport when the system is
    inconsistent or the solved point breaks an inequality, and
    IrrationalParameters on non-finite instance data.
    """
    sk = _Skeleton(inst, support)
    n, m, model = sk.n, sk.m, sk.model

    # unknown layout: prices, then alphas, then supported spendings
    edges = sk.mbb_edges()
    if model is ModelKind.SC:
        bvars = [s for s in sk.segs if s[5] == "0"]
        bkey = {(s[0], s[1], s[2]): m + n + e for e, s in enumerate(bvars)}
    else:
        bvars = [(i, j) for i in range(n) for j in sorted(sk.purchases[i])]
        bkey = {ij: m + n + e for e, ij in enumerate(bvars)}
    ncols = m + n + len(bvars)

    eqs: list = []

    def equation(coeffs: dict, rhs: Fraction):
        row = [Fraction(0)] * (ncols + 1)
        for c, w in coeffs.items():
            row[c] += w
        row[ncols] = rhs
        eqs.append(row)

    # rate equalities tie each supported pair's price to its buyer scale
    if model is ModelKind.SC:
        for i, j, l, rate, _length, state in sk.segs:
            if state == "0":
                equation({m + i: rate, j: Fraction(-1)}, Fraction(0))
    else:
        for i, j in edges:
            equation({m + i: sk.values[i][j], j: Fraction(-1)}, Fraction(0))

    # budget rows; full segments enter as constants
    for i in range(n):
        coeffs: dict = {}
        spent = Fraction(0)
        if model is ModelKind.SC:
            for ii, j, l, _rate, length, state in sk.segs:
                if ii != i:
                    continue
                if state == "+":
                    spent += length
                elif state == "0":
                    coeffs[bkey[(i, j, l)]] = Fraction(1)
        else:
            for j in sorted(sk.purchases[i]):
                coeffs[bkey[(i, j)]] = Fraction(1)
        if model is ModelKind.UR and i in sk.binding:
            if sk.dcaps[i] is None:
                raise DegenerateSupport(
                    "buyer %d is marked capped but has no utility cap" % i
                )
            coeffs[m + i] = coeffs.get(m + i, Fraction(0)) - sk.dcaps[i]
            equation(coeffs, -spent)
        else:
            equation(coeffs, sk.budgets[i] - spent)

    # clearing columns; unsold uncapped goods are priced by the empty sum
    col_terms: list = [dict() for _ in range(m)]
    col_const = [Fraction(0)] * m
    if model is ModelKind.SC:
        for i, j, l, _rate, length, state in sk.segs:
            if state == "+":
                col_const[j] += length
            elif state == "0":
                col_terms[j][bkey[(i, j, l)]] = Fraction(1)
    else:
        for i, j in bvars:
            col_terms[j][bkey[(i, j)]] = Fraction(1)
    for j in range(m):
        coeffs = dict(col_terms[j])
        if model is not ModelKind.UR and j in sk.binding:
            if sk.caps[j] is None:
                raise DegenerateSupport(
                    "good %d is marked capped but has no spending cap" % j
                )
            # no price term: a capped column only constrains the money in it,
            # leaving the price floored by the cap and pinned elsewhere
            equation(coeffs, sk.caps[j] - col_const[j])
        else:
            # money in equals price out; for a good nobody touches this
            # degenerates to p_j = 0, which is what clearing demands
            coeffs[j] = coeffs.get(j, Fraction(0)) - Fraction(1)
            equation(coeffs, -col_const[j])

    # component gauge: capped-only blocks fix prices only up to a common
    # factor, so pin one price now and move the block to its extreme
    # feasible scale afterwards
    comps = _components(n, m, edges)
    free_comps = []
    for buyers, goods in comps:
        if not goods or not buyers:
            # scale freedom needs a rate equality tying a buyer to a good;
            # lone goods are priced by their own clearing equation
            continue
        if model is ModelKind.UR:
            anchored = any(i not in sk.binding for i in buyers)
        else:
            anchored = any(j not in sk.binding for j in goods)
        if not anchored:
            j0 = min(goods)
            pin = Fraction(1) if model is ModelKind.UR else sk.caps[j0]
            if pin is None:
                raise DegenerateSupport(
                    "good %d lacks the cap its component is pinned by" % j0
                )
            equation({j0: Fraction(1)}, pin)
            free_comps.append((frozenset(buyers), frozenset(goods)))

    pivots = _rref(eqs, ncols)
    x = [Fraction(0)] * ncols
    for c, r in pivots.items():
        x[c] = eqs[r][ncols]

    touched = set()
    for row in eqs:
        for c in range(ncols):
            if row[c] != 0:
                touched.add(c)
    for c in range(ncols):
        if c in touched and c not in pivots and c < m + n:
            raise DegenerateSupport(
                "prices remain underdetermined beyond a component scale"
            )

    p_hat = x[:m]
    a_hat = x[m : m + n]

    # leftover degrees of freedom: one scale per capped-only component,
    # a price for each good no equation mentions, a scale factor for
    # each buyer whose rate equalities all dropped out.  Raise each to
    # the largest lower bound the inequalities impose (smallest upper
    # bound for utility-capped components) and iterate, since the
    # bounds reference one another.
    comp_of_buyer = {}
    comp_of_good = {}
    for k, (buyers, goods) in enumerate(free_comps):
        for i in buyers:
            comp_of_buyer[i] = k
        for j in goods:
            comp_of_good[j] = k
    conv_goods = sorted(j for j in range(m) if j not in touched)
    free_alphas = sorted(i for i in range(n) if m + i not in touched)

    scales = [Fraction(1)] * len(free_comps)
    conv_p = {j: sk.caps[j] if j in sk.binding and sk.caps[j] is not None else Fraction(0) for j in conv_goods}
    free_a = {i: Fraction(0) for i in free_alphas}

    def cur_p(j):
        if j in conv_p:
            return conv_p[j]
        k = comp_of_good.get(j)
        return p_hat[j] if k is None else p_hat[j] * scales[k]

    def cur_a(i):
        if i in free_a:
            return free_a[i]
        k = comp_of_buyer.get(i)
        return a_hat[i] if k is None else a_hat[i] * scales[k]

    def floors_into(j, exclude_comp=None):
        """Largest lower bound on p_j from rate ceilings of buyers
        outside exclude_comp."""
        best = Fraction(0)
        if model is ModelKind.SC:
            for i, jj, _l, rate, _length, state in sk.segs:
                if jj != j or state != "-":
                    continue
                if exclude_comp is not None and comp_of_buyer.get(i) == exclude_comp:
                    continue
                best = max(best, rate * cur_a(i))
        else:
            for i in range(n):
                if exclude_comp is not None and comp_of_buyer.get(i) == exclude_comp:
                    continue
                if sk.values[i][j] > 0:
                    best = max(best, sk.values[i][j] * cur_a(i))
        return best

    rounds = 2 * (n + m) + 4
    for _ in range(rounds):
        changed = False
        for k, (buyers, goods) in enumerate(free_comps):
            if model is ModelKind.UR:
                s = None
                for i in buyers:
                    spent = sum(
                        (x[bkey[(i, j)]] for j in sorted(sk.purchases[i])),
                        Fraction(0),
                    )
                    if spent > 0:
                        c = sk.budgets[i] / spent
                        s = c if s is None or c < s else s
                for i in buyers:
                    if a_hat[i] <= 0:
                        continue
                    for j in range(m):
                        if j in goods or sk.values[i][j] <= 0:
                            continue
                        c = cur_p(j) / (sk.values[i][j] * a_hat[i])
                        s = c if s is None or c < s else s
                if s is None:
                    # nothing bounds the block; keep the pinned scale
                    s = scales[k]
                if s != scales[k]:
                    scales[k] = s
                    changed = True
            else:
                s = Fraction(1)
                for j in goods:
                    lo = floors_into(j, exclude_comp=k)
                    cap = sk.caps[j] if j in sk.binding else None
                    if cap is not None:
                        lo = max(lo, cap)
                    if lo > 0:
                        if p_hat[j] <= 0:
                            raise DegenerateSupport(
                                "good %d needs a positive price its component cannot scale to" % j
                            )
                        s = max(s, lo / p_hat[j])
                if s > scales[k]:
                    scales[k] = s
                    changed = True
        for j in conv_goods:
            lo = floors_into(j)
            if j in sk.binding and sk.caps[j] is not None:
                lo = max(lo, sk.caps[j])
            if lo > conv_p[j]:
                conv_p[j] = lo
                changed = True
        if model is ModelKind.SC:
            for i in free_alphas:
                lo = Fraction(0)
                for ii, j, _l, rate, _length, state in sk.segs:
                    if ii == i and state == "+":
                        lo = max(lo, cur_p(j) / rate)
                if lo > free_a[i]:
                    free_a[i] = lo
                    changed = True
        if not changed:
            break
    else:
        raise DegenerateSupport("support scale bounds do not stabilize")

    prices = tuple(cur_p(j) for j in range(m))
    alphas = tuple(cur_a(i) for i in range(n))

    grid = [[Fraction(0)] * m for _ in range(n)]
    segment_spending = None
    if model is ModelKind.SC:
        seg_grid = [
            [
                [Fraction(0)] * len(inst.kinds[i].segments[j])
                for j in range(m)
            ]
            for i in range(n)
        ]
        for i, j, l, _rate, length, state in sk.segs:
            if state == "+":
                seg_grid[i][j][l] = length
            elif state == "0":
                seg_grid[i][j][l] = x[bkey[(i, j, l)]]
            grid[i][j] += seg_grid[i][j][l]
        segment_spending = tuple(
            tuple(tuple(col) for col in row) for row in seg_grid
        )
    else:
        for i, j in bvars:
            v = x[bkey[(i, j)]]
            k = comp_of_buyer.get(i)
            if model is ModelKind.UR and k is not None:
                v = v * scales[k]
            grid[i][j] = v

    req = RationalEquilibrium(
        prices=prices,
        spending=tuple(tuple(row) for row in grid),
        alphas=alphas,
        segment_spending=segment_spending,
    )
    if not verify_exact(req, inst, support):
        raise DegenerateSupport(
            "the claimed support admits no consistent exact equilibrium"
        )
    return req


def verify_exact(req: RationalEquilibrium, inst: MarketInstance, support: SupportStructure) -> bool:
    """Check every support constraint with exact arithmetic.

    Returns False rather than raising: a malformed or irrational input
    simply is not an exact equilibrium.
    """
    try:
        sk = _Skeleton(inst, support)
    except (ValidationError, IrrationalParameters):
        return False
    n, m, model = sk.n, sk.m, sk.model
    P = req.prices
    A = req.alphas
    Bm = req.spending
    if len(P) != m or len(A) != n or len(Bm) != n:
        return False
    if any(len(row) != m for row in Bm):
        return False
    if any(p < 0 for p in P) or any(a < 0 for a in A):
        return False
    if any(x < 0 for row in Bm for x in row):
        return False

    if model is ModelKind.SC:
        if req.segment_spending is None or len(req.segment_spending) != n:
            return False
        for i, j, l, rate, length, state in sk.segs:
            s = req.segment_spending[i][j][l]
            if s < 0 or s > length:
                return False
            bang = rate * A[i]
            if state == "+":
                if s != length or bang < P[j]:
                    return False
            elif state == "0":
                if bang != P[j]:
                    return False
            else:
                if s != 0 or bang > P[j]:
                    return False
        for i in range(n):
            for j in range(m):
                if sum(req.segment_spending[i][j], Fraction(0)) != Bm[i][j]:
                    return False
    else:
        for i in range(n):
            for j in range(m):
                bang = sk.values[i][j] * A[i]
                if j in sk.purchases[i]:
                    if bang != P[j]:
                        return False
                else:
                    if Bm[i][j] != 0:
                        return False
                if bang > P[j]:
                    return False

    for i in range(n):
        spent = sum(Bm[i], Fraction(0))
        if model is ModelKind.UR:
            if i in sk.binding:
                if sk.dcaps[i] is None:
                    return False
                if spent != A[i] * sk.dcaps[i] or spent > sk.budgets[i]:
                    return False
            else:
                if spent != sk.budgets[i]:
                    return False
                if sk.dcaps[i] is not None and spent > A[i] * sk.dcaps[i]:
                    return False
        else:
            if spent != sk.budgets[i]:
                return False

    for j in range(m):
        col = sum((Bm[i][j] for i in range(n)), Fraction(0))
        if model is ModelKind.UR:
            if col != P[j]:
                return False
            continue
        cap = sk.caps[j]
        if j in sk.binding:
            if cap is None or col != cap or P[j] < cap:
                return False
        else:
            if col != P[j]:
                return False
            if cap is not None and P[j] > cap:
                return False
    return True
