"""Equilibrium computation for Fisher markets and their capped variants."""

from . import errors
from .exact import (
    RationalEquilibrium,
    SupportStructure,
    detect_support,
    exact_equilibrium,
    verify_exact,
)
from .model import (
    CES,
    Leontief,
    Linear,
    MarketInstance,
    ModelKind,
    QuasiLinear,
    Segment,
    SpendingConstraint,
    SpendingProfile,
    instance_from_json,
    instance_to_json,
    normalize_valuations,
    scale_agent,
    validate_instance,
)
from .programs import ProgramKind, ProgramSpec, build_program
from .solver import Equilibrium, Method, SolveOptions, maximize, recover_prices, solve
from .verify import CheckReport, check_equilibrium, duality_gap, existence_condition

__all__ = [
    "CES",
    "CheckReport",
    "Equilibrium",
    "Leontief",
    "Linear",
    "MarketInstance",
    "Method",
    "ModelKind",
    "ProgramKind",
    "ProgramSpec",
    "QuasiLinear",
    "RationalEquilibrium",
    "Segment",
    "SolveOptions",
    "SpendingConstraint",
    "SpendingProfile",
    "SupportStructure",
    "build_program",
    "check_equilibrium",
    "detect_support",
    "duality_gap",
    "errors",
    "exact_equilibrium",
    "existence_condition",
    "instance_from_json",
    "instance_to_json",
    "maximize",
    "normalize_valuations",
    "recover_prices",
    "scale_agent",
    "solve",
    "validate_instance",
    "verify_exact",
]
