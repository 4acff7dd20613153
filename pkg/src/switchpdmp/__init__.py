"""Simulation and analysis of piecewise deterministic Markov processes with
Markov switching between finitely many vector fields."""

from __future__ import annotations

__version__ = "0.1.0"

from .expr import DomainError, Expression, differentiate, evaluate, parse, to_string
from .system import Box, CallableField, ExprField, InvariantViolation, JumpSequence, SwitchingSystem, validate
from .flow import composite_flow, integrate, pullback_family, submersion_rank, variational_integrate
from .simulate import HybridPath, ensemble, replica_rng, sample_embedded, sample_path, sojourn_times
from .measure import (
    EmpiricalMeasure,
    Histogram,
    apply_Ktilde,
    continuous_occupation,
    correspondence_gap,
    discrete_occupation,
    histogram,
    ks_distance_1d,
    ktilde_pushforward,
    tv_distance,
)
from .brackets import check_condition, lie_bracket, scan_region, strong_family, weak_family
from .reach import ReachGrid, accessible_set, omega_limit, reachable
from .examples import get_example, interval_beta, planar_linear, radulescu, torus

__all__ = [
    "Box",
    "CallableField",
    "DomainError",
    "EmpiricalMeasure",
    "ExprField",
    "Expression",
    "Histogram",
    "HybridPath",
    "InvariantViolation",
    "JumpSequence",
    "ReachGrid",
    "SwitchingSystem",
    "__version__",
    "accessible_set",
    "apply_Ktilde",
    "check_condition",
    "composite_flow",
    "continuous_occupation",
    "correspondence_gap",
    "differentiate",
    "discrete_occupation",
    "ensemble",
    "evaluate",
    "get_example",
    "histogram",
    "integrate",
    "interval_beta",
    "ks_distance_1d",
    "ktilde_pushforward",
    "lie_bracket",
    "omega_limit",
    "parse",
    "planar_linear",
    "pullback_family",
    "radulescu",
    "reachable",
    "replica_rng",
    "sample_embedded",
    "sample_path",
    "scan_region",
    "sojourn_times",
    "strong_family",
    "submersion_rank",
    "to_string",
    "torus",
    "tv_distance",
    "validate",
    "variational_integrate",
    "weak_family",
]
