"""Exception types raised across the package.

Every error that callers are expected to catch has its own class; the
CLI maps them onto exit codes.  ValidationError subclasses signal a bad
instance, SolveError subclasses a failed solve, and the remaining ones
are operation-specific.
"""


class FisheqError(Exception):
    """Base class for all package errors."""


class ValidationError(FisheqError):
    """An instance violates a model invariant."""


class NegativeBudget(ValidationError):
    pass


class BadCesExponent(ValidationError):
    pass


class NonDecreasingSegments(ValidationError):
    pass


class MixedCaps(ValidationError):
    pass


class EmptyMarket(ValidationError):
    pass


class EmptyDemand(ValidationError):
    """A utility cap of zero: the buyer wants nothing, which we reject."""


class NonPositiveScale(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ModelMismatch(ValidationError):
    """Requested program does not fit the instance (e.g. caps missing)."""


class BadParams(ValidationError):
    """Generator parameters outside their documented domain."""


class SolveError(FisheqError):
    """Base class for solver failures."""


class Infeasible(SolveError):
    """The program has an empty feasible region."""


class DidNotConverge(SolveError):
    """Residual target not reached; diagnostics carry the residual trace."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ZeroUtility(SolveError):
    """A buyer with zero utility at the current iterate (degenerate start)."""


class OutOfDomain(FisheqError):
    """Argument outside a conjugate's domain."""


class DualInfeasible(FisheqError):
    """A dual point violates a dual constraint; carries the index."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SubgradientSet(FisheqError):
    """The reduced dual is not differentiable here (an MBB tie)."""


class NonPositivePrice(FisheqError):
    pass


class AllZero(FisheqError):
    pass


class InconsistentRates(FisheqError):
    """Bang-per-buck propagation produced contradictory rates."""


class MissingCertificate(FisheqError):
    pass


class AmbiguousSupport(FisheqError):
    """An entry is within tolerance of two classifications."""


class DegenerateSupport(FisheqError):
    """The claimed support admits no consistent exact equilibrium."""


class IrrationalParameters(FisheqError):
    pass


class NotUnitCaps(FisheqError):
    pass


class NotNormalized(FisheqError):
    pass


class TooLarge(FisheqError):
    """Brute-force enumeration would exceed the guard."""


class UnsupportedBuyer(FisheqError):
    """A buyer with empty support where support is required."""


class InconsistentSupport(FisheqError):
    """Supported goods imply contradictory per-buyer scale factors."""


class InfeasibleSpending(FisheqError):
    """A spending profile violates the feasibility claimed for it."""
