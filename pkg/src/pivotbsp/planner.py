"""Candidate evaluation and selection by expected information gain.

Two modes are provided.  In ML mode every candidate collapses to a single
hypothesis built from maximum-likelihood observations.  In multi-hypothesis
mode each candidate expands into a finite tree of observation branches, and a
myopic reordering is applied before every branching.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Mapping, Sequence

import numpy as np

from . import belief as bel
from .belief import AffectedReport, SqrtBelief
from .factorgraph import (
    LinearFactor,
    UpdateGraph,
    VariableId,
    between_factor,
    se2_between,
    se2_compose,
)
from .linalg import FlopCounter
from .ordering import MAX, ClassAssignment, ClassCount, classify, involvement_levels, pivot_order

THREADS_ENV = "PIVOTBSP_THREADS"
ARGMAX_TIE_TOL = 1e-9


class PlanningError(Exception):
    pass


class EmptyPath(PlanningError):
    pass


class NoCandidates(PlanningError):
    pass


class BranchExplosion(PlanningError):
    def __init__(self, cap: int):
        super().__init__(f"hypothesis tree exceeded {cap} nodes")
        self.cap = cap


class UnknownTactic(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items: Sequence) -> list:
    """Map preserving input order; worker count capped by the environment."""
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TacticConfig:
    """One ordering tactic.  ``c is None`` means no predictive reordering."""

    name: str = "baseline"
    c: ClassCount | None = None
    fill_aware: bool = False
    force_incremental: bool = False
    keep_order: bool = True
    suffix_policy: str = "baseline"

    @property
    def reorders(self) -> bool:
        return self.c is not None


TACTIC_NAMES = ("baseline", "pivot1", "pivot5", "pivotmax", "pivot1star", "pivot5star", "pivotmaxstar")


def parse_tactic(name: str, keep_order: bool = True, force_incremental: bool = False) -> TacticConfig:
    """``baseline`` or ``pivot<c>[star]`` with ``c`` a positive integer or ``max``."""
    key = name.strip().lower()
    if key == "baseline":
        return TacticConfig("baseline", None, keep_order=keep_order)
    if not key.startswith("pivot"):
        raise UnknownTactic(name)
    body = key[len("pivot") :]
    star = body.endswith("star")
    if star:
        body = body[: -len("star")]
    if body == "max":
        c: ClassCount = MAX
    elif body.isdigit() and int(body) >= 1:
        c = int(body)
    else:
        raise UnknownTactic(name)
    return TacticConfig(key, c, fill_aware=star, force_incremental=force_incremental and star, keep_order=keep_order)


@dataclass(frozen=True)
class PlanningModels:
    """Noise models and loop-closure prediction settings."""

    odometry_information: np.ndarray = field(default_factory=lambda: np.diag([400.0, 400.0, 2500.0]))
    closure_information: np.ndarray = field(default_factory=lambda: np.diag([400.0, 400.0, 2500.0]))
    lc_radius: float = 0.75
    lc_min_gap: int = 5
    max_closures: int = 1
    #: only poses whose id is a multiple of this may close loops (keyframes)
    lc_stride: int = 1


# ---------------------------------------------------------------------------
# hypotheses
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    id: int
    path: list[tuple[float, float]]
    hypothesis: UpdateGraph | None = None


@dataclass
class HypothesisNode:
    belief: SqrtBelief
    depth: int
    log_weight: float
    pending: list[tuple[float, UpdateGraph]] = field(default_factory=list)
    current: VariableId | None = None
    next_id: int = 0


@dataclass
class PlanResult:
    chosen: int
    values: dict[int, float]
    reports: dict[int, AffectedReport]
    reorder_report: AffectedReport
    #: the belief the candidates were evaluated against (after any reordering)
    reordered: SqrtBelief | None = field(default=None, repr=False)


def path_poses(path: Sequence[tuple[float, float]], initial_heading: float) -> list[np.ndarray]:
    """Waypoints as SE(2) poses heading along each step; the first keeps ``initial_heading``."""
    poses = [np.array([path[0][0], path[0][1], initial_heading], dtype=float)]
    for k in range(1, len(path)):
        dx = path[k][0] - path[k - 1][0]
        dy = path[k][1] - path[k - 1][1]
        th = math.atan2(dy, dx) if (dx or dy) else float(poses[-1][2])
        poses.append(np.array([path[k][0], path[k][1], th], dtype=float))
    return poses


def closure_targets(
    position: np.ndarray,
    history: Sequence[tuple[VariableId, np.ndarray]],
    radius: float,
    max_count: int,
) -> list[VariableId]:
    """Nearest past poses within ``radius`` of ``position``, closest first, ties by id."""
    hits = []
    for v, p in history:
        dist = math.hypot(p[0] - position[0], p[1] - position[1])
        if dist <= radius:
            hits.append((dist, v.id, v))
    hits.sort(key=lambda t: (t[0], t[1]))
    return [v for _, _, v in hits[:max_count]]


def _zero_residual(f: LinearFactor, delta: Mapping[VariableId, np.ndarray]) -> LinearFactor:
    rhs = np.zeros(f.dim)
    for v, blk in zip(f.involved, f.blocks):
        dv = delta.get(v)
        if dv is not None:
            rhs = rhs + blk @ dv
    return LinearFactor(f.involved, f.blocks, rhs)


def _pose_history(b: SqrtBelief, estimate, current: VariableId, min_gap: int, below_id: int | None):
    out = []
    for v in b.order:
        if v.dim != 3 or v.id > current.id - min_gap:
            continue
        if below_id is not None and v.id >= below_id:
            continue
        out.append((v, estimate[v]))
    out.sort(key=lambda t: t[0].id)
    return out


def default_current(b: SqrtBelief) -> VariableId:
    poses = [v for v in b.order if v.dim == 3]
    if not poses:
        raise PlanningError("belief holds no pose variable")
    return max(poses)


def ml_hypothesis(
    b: SqrtBelief,
    path: Sequence[tuple[float, float]],
    models: PlanningModels | None = None,
    lc_radius: float | None = None,
    *,
    current: VariableId | None = None,
    first_id: int | None = None,
    closures_below_id: int | None = None,
    include_closures: bool = True,
) -> UpdateGraph:
    """Maximum-likelihood update graph for following ``path`` from the current pose.

    New poses are predicted by composing the MAP estimate with the planned
    motion.  Every factor's right-hand side is the value that leaves the MAP
    estimate unchanged, so the update only adds information.
    """
    if path is None:
        raise EmptyPath("no path given")
    if len(path) <= 1:
        return UpdateGraph([], [], {})
    models = models or PlanningModels()
    radius = models.lc_radius if lc_radius is None else lc_radius
    current = current or default_current(b)
    next_id = first_id if first_id is not None else max(v.id for v in b.order) + 1

    delta = bel.correction(b)
    estimate = {v: b.lin_point[v] + delta[v] for v in b.order}
    history = _pose_history(b, estimate, current, models.lc_min_gap, closures_below_id)

    planned = path_poses(path, float(estimate[current][2]))
    prev, prev_est = current, estimate[current]
    new_vars, factors, values = [], [], {}
    for k in range(1, len(planned)):
        control = se2_between(planned[k - 1], planned[k])
        pred = se2_compose(prev_est, control)
        v = VariableId(next_id)
        next_id += 1
        new_vars.append(v)
        values[v] = pred
        delta[v] = np.zeros(3)
        lin_prev = b.lin_point.get(prev, values.get(prev))
        f = between_factor(prev, v, lin_prev, pred, se2_between(estimate.get(prev, prev_est), pred), models.odometry_information)
        factors.append(_zero_residual(f, delta))
        if include_closures and v.id % models.lc_stride == 0:
            for old in closure_targets(pred, history, radius, models.max_closures):
                g = between_factor(
                    old, v, b.lin_point[old], pred, se2_between(estimate[old], pred), models.closure_information
                )
                factors.append(_zero_residual(g, delta))
        estimate[v] = pred
        prev, prev_est = v, pred
    return UpdateGraph(new_vars, factors, values)


# ---------------------------------------------------------------------------
# evaluation and selection
# ---------------------------------------------------------------------------


def evaluate(b: SqrtBelief, h: UpdateGraph, tactic: str = "baseline") -> tuple[float, AffectedReport]:
    """Information gain of folding ``h`` into a copy of ``b``."""
    if not h.new_factors and not h.new_variables:
        return 0.0, AffectedReport.empty(b.n, b.nnz)
    nb, report = bel.incremental_update(b, h, tactic)
    return bel.entropy(b) - bel.entropy(nb), report


def argmax_id(values: Mapping[int, float], tol: float = ARGMAX_TIE_TOL) -> int:
    best = max(values.values())
    return min(k for k, v in values.items() if v >= best - tol)


def _combine(reports: Iterable[AffectedReport]) -> AffectedReport:
    total = AffectedReport(0, 0, 0, FlopCounter(), 0)
    for r in reports:
        total.affected_vars += r.affected_vars
        total.affected_scalars += r.affected_scalars
        total.flops.add(r.flops)
        total.nnz_after = r.nnz_after
    return total


def reorder_for(
    b: SqrtBelief,
    hyps: Sequence[UpdateGraph],
    tactic: TacticConfig,
    classes: ClassAssignment | None = None,
) -> tuple[SqrtBelief, AffectedReport]:
    if not tactic.reorders:
        return b, AffectedReport.empty(b.n, b.nnz)
    if classes is not None and not classes.class_of:
        classes = classify(classes, tactic.c)
    new = pivot_order(b, hyps, tactic.c, tactic.fill_aware, tactic.force_incremental, classes)
    return bel.apply_order(b, new)


def plan_ml(
    b: SqrtBelief,
    candidates: Sequence[Candidate],
    tactic: TacticConfig | None = None,
    classes: ClassAssignment | None = None,
) -> tuple[PlanResult, SqrtBelief]:
    """Reorder once from all candidate hypotheses, then evaluate every candidate.

    ``classes`` overrides the level-based class division (for example with a
    heuristic one); it can change costs but never the values.
    """
    if not candidates:
        raise NoCandidates("no candidates to evaluate")
    tactic = tactic or TacticConfig()
    for cand in candidates:
        if cand.hypothesis is None:
            cand.hypothesis = ml_hypothesis(b, cand.path)
    hyps = [c.hypothesis for c in candidates]
    rb, reorder_report = reorder_for(b, hyps, tactic, classes)

    results = parallel_map(lambda c: evaluate(rb, c.hypothesis, tactic.suffix_policy), list(candidates))
    values = {c.id: v for c, (v, _) in zip(candidates, results)}
    reports = {c.id: r for c, (_, r) in zip(candidates, results)}
    result = PlanResult(argmax_id(values), values, reports, reorder_report, rb)
    return result, (rb if tactic.keep_order else b)


# ---------------------------------------------------------------------------
# multi-hypothesis trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchModel:
    """Finite observation branching for one path segment.

    When a segment predicts loop closures, it branches into "closures observed"
    (weight ``p_closure``) and "not observed".  Each observed branch further
    splits over ``residual_levels`` (in standard deviations, weighted by the
    normal density).  At most ``branch_k`` branches survive, by weight.
    """

    models: PlanningModels = field(default_factory=PlanningModels)
    p_closure: float = 0.5
    residual_levels: tuple[float, ...] = (0.0,)

    def branches(
        self,
        node: HypothesisNode,
        segment: Sequence[tuple[float, float]],
        branch_k: int,
        closures_below_id: int,
    ) -> list[tuple[float, UpdateGraph]]:
        full = ml_hypothesis(
            node.belief, segment, self.models, current=node.current, first_id=node.next_id,
            closures_below_id=closures_below_id,
        )
        if not full.new_variables:
            return [(1.0, full)]
        odo_only = ml_hypothesis(
            node.belief, segment, self.models, current=node.current, first_id=node.next_id,
            include_closures=False,
        )
        n_closures = len(full.new_factors) - len(odo_only.new_factors)
        if n_closures == 0:
            return [(1.0, full)]
        dens = np.array([math.exp(-0.5 * z * z) for z in self.residual_levels])
        dens = dens / dens.sum()
        out = []
        for z, w in zip(self.residual_levels, dens):
            out.append((self.p_closure * float(w), _shift_closures(full, odo_only, z)))
        out.append((1.0 - self.p_closure, odo_only))
        out = [(w, h) for w, h in out if w > 0.0]
        out.sort(key=lambda t: -t[0])
        out = out[:branch_k]
        total = sum(w for w, _ in out)
        return [(w / total, h) for w, h in out]


def _shift_closures(full: UpdateGraph, odo_only: UpdateGraph, z: float) -> UpdateGraph:
    if z == 0.0:
        return full
    odo_keys = {f.key() for f in odo_only.new_factors}
    factors = []
    for f in full.new_factors:
        if f.key() in odo_keys:
            factors.append(f)
        else:
            factors.append(LinearFactor(f.involved, f.blocks, f.rhs + z))
    return UpdateGraph(list(full.new_variables), factors, dict(full.initial_values))


def split_path(path: Sequence, horizon: int) -> list[list]:
    """Cut a path into ``horizon`` consecutive segments sharing their endpoints."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    steps = len(path) - 1
    if steps <= 0:
        return [list(path)] + [[path[-1]] for _ in range(horizon - 1)] if path else [[]]
    cuts = [round(k * steps / horizon) for k in range(horizon + 1)]
    return [list(path[cuts[k] : cuts[k + 1] + 1]) for k in range(horizon)]


def _last_pose(node: HypothesisNode, h: UpdateGraph) -> tuple[VariableId, int]:
    if h.new_variables:
        last = max(h.new_variables)
        return last, last.id + 1
    return node.current, node.next_id


def plan_multi(
    b: SqrtBelief,
    candidates: Sequence[Candidate],
    branch_model: BranchModel | None = None,
    horizon: int = 1,
    branch_k: int = 2,
    tactic: TacticConfig | None = None,
    max_nodes: int = 10_000,
    classes: ClassAssignment | None = None,
) -> PlanResult:
    """Expected information gain over enumerated observation trees.

    Each candidate path is cut into ``horizon`` segments.  The reordering is
    recomputed before every branching from the branches about to be applied:
    at the root from all candidates' first-level branches, deeper down from
    the node's own children.  ``classes``, when given, replaces the root
    division (heuristic classification).
    """
    if not candidates:
        raise NoCandidates("no candidates to evaluate")
    if branch_k < 1:
        raise ValueError("branch_k must be at least 1")
    tactic = tactic or TacticConfig()
    model = branch_model or BranchModel()
    current = default_current(b)
    first_id = max(v.id for v in b.order) + 1
    h_root = bel.entropy(b)
    nodes = 0

    def count(k: int = 1):
        nonlocal nodes
        nodes += k
        if nodes > max_nodes:
            raise BranchExplosion(max_nodes)

    segments = {c.id: split_path(c.path, horizon) for c in candidates}
    root = HypothesisNode(b, 0, 0.0, current=current, next_id=first_id)
    first = {c.id: model.branches(root, segments[c.id][0], branch_k, first_id) for c in candidates}
    count(1 + sum(len(v) for v in first.values()))
    rb, reorder = reorder_for(b, [h for br in first.values() for _, h in br], tactic, classes)
    root.belief = rb
    reorder_reports = [reorder]

    def expand(node: HypothesisNode, branches, cand_id: int) -> tuple[float, list[AffectedReport]]:
        value = 0.0
        reports = []
        for w, h in branches:
            nb, rep = bel.incremental_update(node.belief, h, tactic.suffix_policy)
            reports.append(rep)
            cur, nxt = _last_pose(node, h)
            child = HypothesisNode(nb, node.depth + 1, node.log_weight + math.log(w), current=cur, next_id=nxt)
            if child.depth >= horizon:
                value += w * (h_root - bel.entropy(nb))
                continue
            kids = model.branches(child, segments[cand_id][child.depth], branch_k, first_id)
            count(len(kids))
            child.pending = kids
            child.belief, rr = reorder_for(nb, [k for _, k in kids], tactic)
            reorder_reports.append(rr)
            v, sub = expand(child, kids, cand_id)
            value += w * v
            reports.extend(sub)
        return value, reports

    values, reports = {}, {}
    for c in candidates:
        v, reps = expand(root, first[c.id], c.id)
        values[c.id] = v
        reports[c.id] = _combine(reps)
    return PlanResult(argmax_id(values), values, reports, _combine(reorder_reports), rb)


def heuristic_classification(
    b: SqrtBelief,
    candidates: Sequence[Candidate],
    mode: Literal["ml_proxy", "never_involved_poses"] = "ml_proxy",
    never_involved: Iterable[VariableId] = (),
    models: PlanningModels | None = None,
) -> ClassAssignment:
    """Involvement levels estimated from ML hypotheses, optionally pinning a subset to zero."""
    hyps = [c.hypothesis if c.hypothesis is not None else ml_hypothesis(b, c.path, models) for c in candidates]
    levels = involvement_levels(b.order, hyps)
    if mode == "never_involved_poses":
        for v in never_involved:
            if v in levels.level:
                levels.level[v] = 0
    elif mode != "ml_proxy":
        raise ValueError(f"unknown classification mode {mode!r}")
    return levels
