"""Market instances for the five models, validation, and normalization.

A MarketInstance holds buyers (budgets, valuation rows, a utility kind
each, optional utility caps d_i) and goods (optional spending caps c_j).
Supply of every good is exactly one unit; non-unit supplies are
expressible by rescaling valuations.  Spending caps and utility caps are
mutually exclusive: the combined model is rejected.

Utility kinds and where their coefficients live:

  linear / quasilinear   the valuation row v_ij
  leontief               phi_ij requirement rates (the valuation row is
                         unused by the solver, kept for serialization)
  ces                    exponent rho < 1, rho != 0, and positive
                         per-good weights (serialized under "phi")
  spending_constraint    per-good segment lists (rate, length) with
                         strictly decreasing rates

Goods valued by nobody are retained and priced 0 downstream rather than
rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    BadCesExponent,
    DimensionMismatch,
    EmptyDemand,
    EmptyMarket,
    InconsistentSupport,
    MixedCaps,
    NegativeBudget,
    NonDecreasingSegments,
    NonPositiveScale,
    UnsupportedBuyer,
    ValidationError,
)


class ModelKind(Enum):
    """Which equilibrium model a solve or check should target."""

    FISHER = "fisher"
    SR = "sr"
    UR = "ur"
    QL = "ql"
    SC = "sc"


@dataclass(frozen=True)
class Linear:
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class QuasiLinear:
    kind: str = field(default="quasilinear", init=False)


@dataclass(frozen=True)
class Leontief:
    """Perfect complements: u(x) = min_j x_j / phi_j over goods with phi_j > 0."""

    phi: tuple[float, ...]
    kind: str = field(default="leontief", init=False)


@dataclass(frozen=True)
class CES:
    """u(x) = (sum_j w_j x_j^rho)^(1/rho) with rho < 1, rho != 0, w_j > 0."""

    rho: float
    weights: tuple[float, ...]
    kind: str = field(default="ces", init=False)


@dataclass(frozen=True)
class Segment:
    """One piece of a spending-constraint rate function.

    rate is utility per dollar relative to a unit price; length is the
    amount of money the segment can absorb.
    """

    rate: float
    length: float


@dataclass(frozen=True)
class SpendingConstraint:
    """Per-good ordered segment lists; rates strictly decrease within a good."""

    segments: tuple[tuple[Segment, ...], ...]
    kind: str = field(default="spending_constraint", init=False)


UtilityKind = Linear | QuasiLinear | Leontief | CES | SpendingConstraint


@dataclass
class MarketInstance:
    """One market: n buyers, m goods, one unit of each good.

    budgets        shape (n,), positive
    values         shape (n, m), nonnegative valuation rows
    kinds          one UtilityKind per buyer
    utility_caps   shape (n,), math.inf where absent
    spending_caps  shape (m,), math.inf where absent
    """

    budgets: np.ndarray
    values: np.ndarray
    kinds: list
    utility_caps: np.ndarray
    spending_caps: np.ndarray

    def __init__(self, budgets, values, kinds=None, utility_caps=None, spending_caps=None):
        self.budgets = np.asarray(budgets, dtype=float)
        self.values = np.asarray(values, dtype=float)
        n = self.budgets.shape[0] if self.budgets.ndim == 1 else 0
        m = self.values.shape[1] if self.values.ndim == 2 else 0
        if kinds is None:
            kinds = [Linear() for _ in range(n)]
        self.kinds = list(kinds)
        if utility_caps is None:
            utility_caps = np.full(n, math.inf)
        self.utility_caps = np.asarray(utility_caps, dtype=float)
        if spending_caps is None:
            spending_caps = np.full(m, math.inf)
        self.spending_caps = np.asarray(spending_caps, dtype=float)

    @property
    def n(self) -> int:
        return self.budgets.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def has_spending_caps(self) -> bool:
        return bool(np.any(np.isfinite(self.spending_caps)))

    @property
    def has_utility_caps(self) -> bool:
        return bool(np.any(np.isfinite(self.utility_caps)))

    def uniform_kind(self) -> str:
        """The shared utility kind tag, or raise if buyers disagree."""
        tags = {k.kind for k in self.kinds}
        if len(tags) != 1:
            raise ValidationError("buyers have mixed utility kinds: %s" % sorted(tags))
        return tags.pop()

    def desire_matrix(self) -> np.ndarray:
        """Boolean (n, m): does buyer i derive any value from good j."""
        out = np.zeros((self.n, self.m), dtype=bool)
        for i, k in enumerate(self.kinds):
            if isinstance(k, Leontief):
                out[i] = np.asarray(k.phi) > 0
            elif isinstance(k, CES):
                out[i] = np.asarray(k.weights) > 0
            elif isinstance(k, SpendingConstraint):
                out[i] = [any(s.rate > 0 for s in segs) for segs in k.segments]
            else:
                out[i] = self.values[i] > 0
        return out

    def worthless_goods(self) -> np.ndarray:
        """Goods no buyer derives value from; they are priced 0 downstream."""
        return ~self.desire_matrix().any(axis=0)


@dataclass
class SpendingProfile:
    """Money matrix b_ij with derived per-good totals q_j.

    For spending-constraint utilities, segment_spend[i][j] lists the
    per-segment amounts, which sum to b[i, j].
    """

    b: np.ndarray
    segment_spend: list | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)

    @property
    def q(self) -> np.ndarray:
        return self.b.sum(axis=0)

    def row_sums(self) -> np.ndarray:
        return self.b.sum(axis=1)


def _require(cond: bool, exc: type, msg: str):
    if not cond:
        raise exc(msg)


def validate_instance(inst: MarketInstance) -> MarketInstance:
    """Check every model invariant; return the instance, frozen, if clean.

    Raises NegativeBudget, BadCesExponent, NonDecreasingSegments,
    MixedCaps, EmptyMarket, EmptyDemand, or DimensionMismatch naming the
    violated field.  Idempotent.
    """
    n = inst.budgets.shape[0] if inst.budgets.ndim == 1 else -1
    _require(n > 0 and inst.values.ndim == 2 and inst.values.shape[0] == n,
             EmptyMarket, "need at least one buyer with a valuation row")
    m = inst.values.shape[1]
    _require(m > 0, EmptyMarket, "need at least one good")
    _require(len(inst.kinds) == n, DimensionMismatch, "one utility kind per buyer")
    _require(inst.utility_caps.shape == (n,), DimensionMismatch, "utility_caps length")
    _require(inst.spending_caps.shape == (m,), DimensionMismatch, "spending_caps length")

    for i, B in enumerate(inst.budgets):
        _require(B > 0 and math.isfinite(B), NegativeBudget,
                 "budget of buyer %d must be positive, got %r" % (i, float(B)))
    _require(bool(np.all(inst.values >= 0)) and bool(np.all(np.isfinite(inst.values))),
             ValidationError, "valuations must be finite and nonnegative")

    for i, k in enumerate(inst.kinds):
        if isinstance(k, Leontief):
            phi = np.asarray(k.phi, dtype=float)
            _require(phi.shape == (m,), DimensionMismatch, "phi length of buyer %d" % i)
            _require(bool(np.all(phi >= 0)), ValidationError, "phi must be nonnegative")
            _require(bool(np.any(phi > 0)), ValidationError,
                     "buyer %d needs some positive Leontief coefficient" % i)
        elif isinstance(k, CES):
            _require(k.rho < 1 and k.rho != 0, BadCesExponent,
                     "rho of buyer %d must satisfy rho < 1, rho != 0, got %r" % (i, k.rho))
            w = np.asarray(k.weights, dtype=float)
            _require(w.shape == (m,), DimensionMismatch, "weights length of buyer %d" % i)
            _require(bool(np.all(w > 0)), ValidationError,
                     "CES weights of buyer %d must be positive" % i)
        elif isinstance(k, SpendingConstraint):
            _require(len(k.segments) == m, DimensionMismatch, "segment lists of buyer %d" % i)
            for j, segs in enumerate(k.segments):
                rates = [s.rate for s in segs]
                _require(all(r > 0 for r in rates),
                         ValidationError, "segment rates must be positive (buyer %d good %d)" % (i, j))
                _require(all(s.length > 0 for s in segs),
                         ValidationError, "segment lengths must be positive (buyer %d good %d)" % (i, j))
                _require(all(a > b for a, b in zip(rates, rates[1:])),
                         NonDecreasingSegments,
                         "rates must strictly decrease across segments (buyer %d good %d)" % (i, j))

    for i, d in enumerate(inst.utility_caps):
        if d == 0:
            raise EmptyDemand("utility cap of buyer %d is zero" % i)
        _require(d > 0, ValidationError, "utility cap of buyer %d must be positive" % i)
    for j, c in enumerate(inst.spending_caps):
        _require(c > 0, ValidationError, "spending cap of good %d must be positive" % j)

    _require(not (inst.has_spending_caps and inst.has_utility_caps), MixedCaps,
             "spending caps and utility caps cannot both be present")

    inst.budgets.setflags(write=False)
    inst.values.setflags(write=False)
    inst.utility_caps.setflags(write=False)
    inst.spending_caps.setflags(write=False)
    return inst


def scale_agent(inst: MarketInstance, i: int, s: float) -> MarketInstance:
    """Return a copy with valuation row i multiplied by s > 0."""
    if not s > 0:
        raise NonPositiveScale("scale must be positive, got %r" % s)
    values = np.array(inst.values, dtype=float)
    values[i] = values[i] * s
    return MarketInstance(np.array(inst.budgets), values, list(inst.kinds),
                          np.array(inst.utility_caps), np.array(inst.spending_caps))


def normalize_valuations(inst: MarketInstance, eq, tol: float = 1e-6) -> MarketInstance:
    """Rescale each buyer so v_ij equals the equilibrium price on her support.

    eq must be a valid SR equilibrium of inst (allocation and prices are
    read from it); linear utilities only.  Each valuation row is
    multiplied by the single constant that makes v_ij = p_j wherever
    x_ij > 0.  Idempotent: normalizing twice equals normalizing once.

    Raises UnsupportedBuyer for a buyer with empty support and
    InconsistentSupport when supported goods imply different scale
    factors beyond tol (the equilibrium is not MBB-consistent).
    """
    x = np.asarray(eq.allocation, dtype=float)
    p = np.asarray(eq.prices, dtype=float)
    if x.shape != (inst.n, inst.m) or p.shape != (inst.m,):
        raise DimensionMismatch("equilibrium does not match the instance")
    values = np.array(inst.values, dtype=float)
    for i in range(inst.n):
        support = np.nonzero(x[i] > 0)[0]
        if support.size == 0:
            raise UnsupportedBuyer("buyer %d has empty support" % i)
        scale = None
        for j in support:
            if values[i, j] > 0:
                if scale is None:
                    scale = p[j] / values[i, j]
                    if not scale > 0:
                        raise InconsistentSupport(
                            "buyer %d buys good %d at a zero price but values it" % (i, j))
            elif p[j] > 0:
                raise InconsistentSupport(
                    "buyer %d buys good %d with zero value at positive price" % (i, j))
        if scale is None:
            scale = 1.0
        for j in support:
            if abs(scale * values[i, j] - p[j]) > tol * max(1.0, p[j]):
                raise InconsistentSupport(
                    "buyer %d: supported goods imply different scales" % i)
        values[i] *= scale
    return MarketInstance(np.array(inst.budgets), values, list(inst.kinds),
                          np.array(inst.utility_caps), np.array(inst.spending_caps))


# ---------------------------------------------------------------------------
# JSON serialization.  The document layout is fixed; unknown fields are
# rejected at every level so that typos fail loudly.

_BUYER_KEYS = {"budget", "values", "utility", "utility_cap"}
_UTILITY_KEYS = {"kind", "rho", "phi", "segments"}
_GOOD_KEYS = {"spending_cap"}
_SEGMENT_KEYS = {"rate", "length"}


def _reject_unknown(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ValidationError("unknown fields %s in %s" % (sorted(extra), where))


def _kind_from_json(u: dict, m: int, where: str) -> UtilityKind:
    _reject_unknown(u, _UTILITY_KEYS, where)
    kind = u.get("kind")
    if kind == "linear":
        return Linear()
    if kind == "quasilinear":
        return QuasiLinear()
    if kind == "leontief":
        if "phi" not in u:
            raise ValidationError("leontief utility needs phi in %s" % where)
        return Leontief(tuple(float(v) for v in u["phi"]))
    if kind == "ces":
        if "rho" not in u or "phi" not in u:
            raise ValidationError("ces utility needs rho and phi in %s" % where)
        return CES(float(u["rho"]), tuple(float(v) for v in u["phi"]))
    if kind == "spending_constraint":
        if "segments" not in u:
            raise ValidationError("spending_constraint utility needs segments in %s" % where)
        per_good = []
        for j, segs in enumerate(u["segments"]):
            parsed = []
            for s in segs:
                _reject_unknown(s, _SEGMENT_KEYS, "%s segment of good %d" % (where, j))
                parsed.append(Segment(float(s["rate"]), float(s["length"])))
            per_good.append(tuple(parsed))
        return SpendingConstraint(tuple(per_good))
    raise ValidationError("unknown utility kind %r in %s" % (kind, where))


def instance_from_json(doc) -> MarketInstance:
    """Parse and validate the JSON instance document."""
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    _reject_unknown(doc, {"buyers", "goods"}, "instance")
    buyers = doc.get("buyers", [])
    goods = doc.get("goods", [])
    if not buyers or not goods:
        raise EmptyMarket("instance needs buyers and goods")
    m = len(goods)
    budgets, rows, kinds, caps = [], [], [], []
    for i, b in enumerate(buyers):
        _reject_unknown(b, _BUYER_KEYS, "buyer %d" % i)
        budgets.append(float(b["budget"]))
        row = [float(v) for v in b["values"]]
        if len(row) != m:
            raise DimensionMismatch("buyer %d has %d values for %d goods" % (i, len(row), m))
        rows.append(row)
        kinds.append(_kind_from_json(b.get("utility", {"kind": "linear"}), m, "buyer %d" % i))
        caps.append(float(b["utility_cap"]) if "utility_cap" in b else math.inf)
    spending = []
    for j, g in enumerate(goods):
        _reject_unknown(g, _GOOD_KEYS, "good %d" % j)
        spending.append(float(g["spending_cap"]) if "spending_cap" in g else math.inf)
    inst = MarketInstance(np.array(budgets), np.array(rows), kinds,
                          np.array(caps), np.array(spending))
    return validate_instance(inst)


def _kind_to_json(k: UtilityKind) -> dict:
    if isinstance(k, Linear):
        return {"kind": "linear"}
    if isinstance(k, QuasiLinear):
        return {"kind": "quasilinear"}
    if isinstance(k, Leontief):
        return {"kind": "leontief", "phi": list(k.phi)}
    if isinstance(k, CES):
        return {"kind": "ces", "rho": k.rho, "phi": list(k.weights)}
    if isinstance(k, SpendingConstraint):
        return {"kind": "spending_constraint",
                "segments": [[{"rate": s.rate, "length": s.length} for s in segs]
                             for segs in k.segments]}
    raise ValidationError("unknown utility kind %r" % (k,))


def instance_to_json(inst: MarketInstance) -> dict:
    buyers = []
    for i in range(inst.n):
        b = {"budget": float(inst.budgets[i]),
             "values": [float(v) for v in inst.values[i]],
             "utility": _kind_to_json(inst.kinds[i])}
        if math.isfinite(inst.utility_caps[i]):
            b["utility_cap"] = float(inst.utility_caps[i])
        buyers.append(b)
    goods = []
    for j in range(inst.m):
        g = {}
        if math.isfinite(inst.spending_caps[j]):
            g["spending_cap"] = float(inst.spending_caps[j])
        goods.append(g)
    return {"buyers": buyers, "goods": goods}
