"""Analysis toolkit for semi-infinite programs: constraint qualifications,
normal cones to feasible sets, and KKT-type multiplier certificates."""

__version__ = "0.1.0"

from .expr import parse, eval_value, eval_grad, to_source
from .model import (
    SipInstance,
    SmoothCost,
    ConvexMaxCost,
    ConstraintFamily,
    EqualityBlock,
    FiniteIndexSet,
    IntervalGridIndexSet,
    CountableIndexSet,
    load_instance,
    loads_instance,
    feasibility_check,
    active_set,
)
from .cq import cq_summary, Verdict
from .optimality import normal_cone, verify_kkt, verify_perturbed_stationarity
from .solver import SolverConfig, solve

__all__ = [
    "parse",
    "eval_value",
    "eval_grad",
    "to_source",
    "SipInstance",
    "SmoothCost",
    "ConvexMaxCost",
    "ConstraintFamily",
    "EqualityBlock",
    "FiniteIndexSet",
    "IntervalGridIndexSet",
    "CountableIndexSet",
    "load_instance",
    "loads_instance",
    "feasibility_check",
    "active_set",
    "cq_summary",
    "Verdict",
    "normal_cone",
    "verify_kkt",
    "verify_perturbed_stationarity",
    "SolverConfig",
    "solve",
]
