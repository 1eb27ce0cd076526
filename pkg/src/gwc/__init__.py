"""Exact and simulated analysis of branching processes whose offspring law
alternates between two mechanisms a and b by generation parity."""
from .errors import (
    GWCError,
    NonConvergence,
    NumericalError,
    PreconditionViolation,
    ValidationError,
)
from .iterate import IterationContext, extinction, f_n_eval, zn_distribution
from .mechanism import MechanismSchedule, OffspringDistribution, schedule_from_json
from .moments import normalizers

__all__ = [
    "GWCError", "IterationContext", "MechanismSchedule", "NonConvergence", "NumericalError",
    "OffspringDistribution", "PreconditionViolation", "ValidationError", "extinction",
    "f_n_eval", "normalizers", "schedule_from_json", "zn_distribution",
]
__version__ = "0.1.0"
