"""Offspring laws, environment families, limit profiles and derived aggregates."""

from bpve.env.diagnostics import NearCriticalityReport, validate_near_criticality
from bpve.env.environment import (
    EnvironmentSpec,
    ResolvedEnvironment,
    implicit_kappa,
    load_config_tree,
)
from bpve.env.laws import OffspringLaw, evaluate_law, shape_function
from bpve.env.limit import KappaRule, LimitProfile, stieltjes_integral
from bpve.env.profile import (
    DiscreteProfile,
    TruncationChoice,
    build_profile,
    horizon_generations,
    rho_bar_riemann,
    select_truncation,
    truncation_tail_sums,
)

__all__ = [
    "DiscreteProfile",
    "EnvironmentSpec",
    "KappaRule",
    "LimitProfile",
    "NearCriticalityReport",
    "OffspringLaw",
    "ResolvedEnvironment",
    "TruncationChoice",
    "build_profile",
    "evaluate_law",
    "horizon_generations",
    "implicit_kappa",
    "load_config_tree",
    "rho_bar_riemann",
    "select_truncation",
    "shape_function",
    "stieltjes_integral",
    "truncation_tail_sums",
    "validate_near_criticality",
]
