"""Sparse square-root inference with predictive variable ordering for belief space planning."""

from .belief import AffectedReport, SqrtBelief, apply_order, build, entropy, incremental_update, map_estimate
from .factorgraph import FactorGraph, LinearFactor, StateOrder, UpdateGraph, VariableId
from .linalg import FlopCounter, SparseRowMatrix, SparseUpperTriangular
from .ordering import MAX, ClassAssignment, PatternGraph, classify, involvement_levels, pivot, pivot_star
from .planner import Candidate, PlanResult, TacticConfig, evaluate, ml_hypothesis, plan_ml, plan_multi
from .simworld import ScenarioConfig, run_scenario

__all__ = [
    "AffectedReport", "SqrtBelief", "apply_order", "build", "entropy", "incremental_update", "map_estimate",
    "FactorGraph", "LinearFactor", "StateOrder", "UpdateGraph", "VariableId",
    "FlopCounter", "SparseRowMatrix", "SparseUpperTriangular",
    "MAX", "ClassAssignment", "PatternGraph", "classify", "involvement_levels", "pivot", "pivot_star",
    "Candidate", "PlanResult", "TacticConfig", "evaluate", "ml_hypothesis", "plan_ml", "plan_multi",
    "ScenarioConfig", "run_scenario",
]
