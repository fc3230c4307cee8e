"""Synthetic lattice active-SLAM scenario and tactic-parallel session driver.

A robot moves on a 4-connected grid with obstacles.  For each goal it plans
among K diverse candidate paths, executes the chosen one step by step with
noisy odometry, and closes loops when it passes near earlier poses.  One
belief per ordering tactic is advanced on the identical factor stream so the
tactics can be compared on cost alone.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import networkx as nx
import numpy as np

from . import belief as bel
from .belief import AffectedReport, SqrtBelief
from .factorgraph import (
    DEFAULT_PRIOR_INFORMATION,
    StateOrder,
    UpdateGraph,
    VariableId,
    between_factor,
    prior_factor,
    se2_between,
)
from .linalg import FlopCounter, SparseUpperTriangular
from .planner import (
    TACTIC_NAMES,
    BranchModel,
    Candidate,
    PlanningModels,
    TacticConfig,
    closure_targets,
    ml_hypothesis,
    parallel_map,
    parse_tactic,
    path_poses,
    plan_ml,
    plan_multi,
)

log = logging.getLogger(__name__)

Cell = tuple[int, int]

CSV_COLUMNS = (
    "session_index",
    "kind",
    "tactic",
    "affected_scalars",
    "flops_fma",
    "flops_rot",
    "nnz_R",
    "reorder_flops",
    "backsub_flops",
    "wall_nanos",
    "chosen",
)


class GoalUnreachable(Exception):
    pass


class ScenarioError(Exception):
    pass


@dataclass
class ScenarioConfig:
    rows: int = 20
    cols: int = 30
    obstacle_density: float = 0.12
    obstacle_seed: int = 7
    goals: list[Cell] | None = None
    n_goals: int = 8
    goal_separation: int = 25
    step_length: float = 1.0
    odom_sigma: tuple[float, float, float] = (0.05, 0.05, 0.02)
    lc_sigma: tuple[float, float, float] = (0.05, 0.05, 0.02)
    prior_sigma: tuple[float, float, float] = (0.01, 0.01, 0.01)
    lc_radius: float = 0.75
    lc_min_gap: int = 5
    max_closures: int = 1
    lc_stride: int = 15
    K: int = 10
    max_overlap: float = 0.6
    horizon: int = 1
    seed: int = 42
    tactics: list[str] = field(default_factory=lambda: list(TACTIC_NAMES))
    keep_order: bool = True
    force_incremental: bool = False
    multi_hyp: bool = False
    branch_k: int = 2
    p_closure: float = 0.5
    max_nodes: int = 10_000
    record_wall_time: bool = False

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be positive")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.horizon < 1 or self.branch_k < 1:
            raise ValueError("horizon and branch_k must be at least 1")
        if self.step_length <= 0 or self.lc_radius <= 0:
            raise ValueError("step_length and lc_radius must be positive")
        for s in (*self.odom_sigma, *self.lc_sigma, *self.prior_sigma):
            if s <= 0:
                raise ValueError("noise sigmas must be positive")
        if not 0.0 <= self.obstacle_density < 1.0:
            raise ValueError("obstacle_density must be in [0, 1)")
        if not self.tactics:
            raise ValueError("at least one tactic is required")
        for g in self.goals or []:
            if not (0 <= g[0] < self.rows and 0 <= g[1] < self.cols):
                raise ValueError(f"goal {g} outside the grid")
        for t in self.tactics:
            parse_tactic(t)

    def tactic_configs(self) -> list[TacticConfig]:
        return [parse_tactic(t, self.keep_order, self.force_incremental) for t in self.tactics]

    def planning_models(self) -> PlanningModels:
        return PlanningModels(
            odometry_information=_information(self.odom_sigma),
            closure_information=_information(self.lc_sigma),
            lc_radius=self.lc_radius,
            lc_min_gap=self.lc_min_gap,
            max_closures=self.max_closures,
            lc_stride=self.lc_stride,
        )


def _information(sigma) -> np.ndarray:
    return np.diag([1.0 / (s * s) for s in sigma])


@dataclass
class MetricsRecord:
    affected_scalars: int = 0
    flops_fma: int = 0
    flops_rot: int = 0
    nnz_R: int = 0
    wall_nanos: int = 0
    reorder_flops: int = 0
    backsub_flops: int = 0
    chosen: int | None = None


@dataclass
class SessionLog:
    index: int
    kind: str
    metrics: dict[str, MetricsRecord]
    chosen: int | None = None


@dataclass
class World:
    rows: int
    cols: int
    lattice: nx.Graph
    start: Cell
    goals: list[Cell]
    step_length: float = 1.0

    def position(self, cell: Cell) -> tuple[float, float]:
        return (cell[1] * self.step_length, cell[0] * self.step_length)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    world: World
    logs: list[SessionLog]
    beliefs: dict[str, SqrtBelief]
    summary: dict
    stream: list[UpdateGraph]
    trajectory: list[np.ndarray]


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


def lattice_graph(rows: int, cols: int, blocked: set[Cell] = frozenset()) -> nx.Graph:
    g = nx.Graph()
    for r in range(rows):
        for c in range(cols):
            if (r, c) in blocked:
                continue
            g.add_node((r, c))
            if r > 0 and (r - 1, c) not in blocked:
                g.add_edge((r - 1, c), (r, c))
            if c > 0 and (r, c - 1) not in blocked:
                g.add_edge((r, c - 1), (r, c))
    return g


def generate_world(cfg: ScenarioConfig) -> World:
    """Grid with random obstacles; the free space reachable from the start holds every goal."""
    cfg.validate()
    rng = np.random.default_rng(cfg.obstacle_seed)
    start = (0, 0)
    mask = rng.random((cfg.rows, cfg.cols)) < cfg.obstacle_density
    keep = {start} | set(map(tuple, cfg.goals or []))
    blocked = {(r, c) for r in range(cfg.rows) for c in range(cfg.cols) if mask[r, c] and (r, c) not in keep}
    g = lattice_graph(cfg.rows, cfg.cols, blocked)
    free = nx.node_connected_component(g, start)
    g = g.subgraph(sorted(free)).copy()

    if cfg.goals is not None:
        goals = [tuple(x) for x in cfg.goals]
        for goal in goals:
            if goal not in free:
                raise GoalUnreachable(f"goal {goal} is not reachable from {start}")
    else:
        goals = _pick_goals(sorted(free), start, cfg.n_goals, cfg.goal_separation, np.random.default_rng(cfg.seed))
    return World(cfg.rows, cfg.cols, g, start, goals, cfg.step_length)


def _pick_goals(cells: list[Cell], start: Cell, n: int, separation: int, rng) -> list[Cell]:
    goals = []
    prev = start
    for _ in range(n):
        far = [c for c in cells if abs(c[0] - prev[0]) + abs(c[1] - prev[1]) >= separation]
        pool = far or [c for c in cells if c != prev] or cells
        prev = pool[int(rng.integers(len(pool)))]
        goals.append(prev)
    return goals


def _edges(path: Sequence[Cell]) -> set[frozenset]:
    return {frozenset((path[i], path[i + 1])) for i in range(len(path) - 1)}


def edge_overlap(p: Sequence[Cell], q: Sequence[Cell]) -> float:
    ep, eq = _edges(p), _edges(q)
    if not ep or not eq:
        return 0.0
    return len(ep & eq) / min(len(ep), len(eq))


def candidate_paths(
    lattice: nx.Graph, start: Cell, goal: Cell, K: int, max_overlap: float = 0.6, penalty: float = 1.5
) -> list[list[Cell]]:
    """Up to ``K`` diverse loopless paths by iterative edge-penalty reweighting.

    Each round takes the cheapest path under the current weights and then
    inflates the weights of its edges.  A path is kept when it is new and
    overlaps every kept path on at most ``max_overlap`` of the shorter one's
    edges.  The result is sorted shortest first.
    """
    if start not in lattice or goal not in lattice or not nx.has_path(lattice, start, goal):
        raise GoalUnreachable(f"no path from {start} to {goal}")
    if start == goal:
        return [[start]]
    weight = {frozenset(e): 1.0 for e in lattice.edges}
    kept: list[list[Cell]] = []
    seen: set[tuple] = set()
    stale = 0
    for _ in range(8 * K):
        path = nx.dijkstra_path(lattice, start, goal, weight=lambda a, b, _d: weight[frozenset((a, b))])
        key = tuple(path)
        if key not in seen:
            seen.add(key)
            stale = 0
            if all(edge_overlap(path, q) <= max_overlap for q in kept):
                kept.append(path)
                if len(kept) == K:
                    break
        else:
            stale += 1
            if stale > 3:
                break
        for e in _edges(path):
            weight[e] *= penalty
    kept.sort(key=len)
    return kept


# ---------------------------------------------------------------------------
# session driver
# ---------------------------------------------------------------------------


def empty_belief() -> SqrtBelief:
    return SqrtBelief(StateOrder([]), SparseUpperTriangular(0, []), np.zeros(0), [], {})


def _inference_step(b: SqrtBelief, u: UpdateGraph, timed: bool) -> tuple[SqrtBelief, MetricsRecord]:
    t0 = time.perf_counter_ns()
    nb, rep = bel.incremental_update(b, u, "baseline")
    back = FlopCounter()
    bel.solve_delta(nb, back)
    wall = time.perf_counter_ns() - t0 if timed else 0
    rec = MetricsRecord(
        affected_scalars=rep.affected_scalars,
        flops_fma=rep.flops.fma,
        flops_rot=rep.flops.rotations,
        nnz_R=nb.nnz,
        wall_nanos=wall,
        backsub_flops=back.fma,
    )
    return nb, rec


def _planning_step(b, candidates, tactic: TacticConfig, cfg: ScenarioConfig, timed: bool):
    t0 = time.perf_counter_ns()
    cands = [Candidate(c.id, c.path, c.hypothesis) for c in candidates]
    if cfg.multi_hyp:
        model = BranchModel(cfg.planning_models(), cfg.p_closure)
        result = plan_multi(b, cands, model, cfg.horizon, cfg.branch_k, tactic, cfg.max_nodes)
        nb = result.reordered if tactic.keep_order else b
    else:
        result, nb = plan_ml(b, cands, tactic)
    wall = time.perf_counter_ns() - t0 if timed else 0
    affected = sum(r.affected_scalars for r in result.reports.values())
    fma = sum(r.flops.fma for r in result.reports.values())
    rot = sum(r.flops.rotations for r in result.reports.values())
    rec = MetricsRecord(
        affected_scalars=affected,
        flops_fma=fma,
        flops_rot=rot,
        nnz_R=nb.nnz,
        wall_nanos=wall,
        reorder_flops=result.reorder_report.flops.fma,
        chosen=result.chosen,
    )
    return nb, rec, result


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Alternate planning and execution over all goals, one belief per tactic."""
    world = generate_world(cfg)
    tactics = cfg.tactic_configs()
    names = [t.name for t in tactics]
    if len(set(names)) != len(names):
        raise ScenarioError("duplicate tactic")
    models = cfg.planning_models()
    rng = np.random.default_rng(cfg.seed)
    timed = cfg.record_wall_time
    odom_info = _information(cfg.odom_sigma)
    lc_info = _information(cfg.lc_sigma)

    beliefs = {n: empty_belief() for n in names}
    logs: list[SessionLog] = []
    stream: list[UpdateGraph] = []
    nnz_before_final_reorder = {n: 0 for n in names}

    def infer(u: UpdateGraph) -> None:
        stream.append(u)
        out = parallel_map(lambda n: _inference_step(beliefs[n], u, timed), names)
        metrics = {}
        for n, (nb, rec) in zip(names, out):
            beliefs[n] = nb
            metrics[n] = rec
        logs.append(SessionLog(len(logs), "inference", metrics))

    # bootstrap: the first pose anchored by a prior
    cell = world.start
    x, y = world.position(cell)
    gt = [np.array([x, y, 0.0])]
    poses = [VariableId(0)]
    prior = prior_factor(poses[0], gt[0], gt[0], _information(cfg.prior_sigma))
    infer(UpdateGraph([poses[0]], [prior], {poses[0]: gt[0].copy()}))

    for goal in world.goals:
        paths = candidate_paths(world.lattice, cell, goal, cfg.K, cfg.max_overlap)
        ref = beliefs[names[0]]
        candidates = []
        for i, p in enumerate(paths):
            wp = [world.position(c) for c in p]
            candidates.append(Candidate(i, wp, ml_hypothesis(ref, wp, models, current=poses[-1])))

        for n in names:
            nnz_before_final_reorder[n] = beliefs[n].nnz
        out = parallel_map(lambda t: _planning_step(beliefs[t.name], candidates, t, cfg, timed), tactics)
        metrics = {}
        chosen = None
        for t, (nb, rec, result) in zip(tactics, out):
            beliefs[t.name] = nb
            metrics[t.name] = rec
            if chosen is None:
                chosen = result.chosen
            elif result.chosen != chosen:
                log.warning("tactic %s chose %d, reference chose %d", t.name, result.chosen, chosen)
        logs.append(SessionLog(len(logs), "planning", metrics, chosen))

        path = paths[chosen]
        planned = path_poses([world.position(c) for c in path], float(gt[-1][2]))
        for k in range(1, len(path)):
            cell = path[k]
            true_pose = planned[k]
            v = VariableId(len(poses))
            odo = se2_between(gt[-1], true_pose) + rng.normal(0.0, cfg.odom_sigma)
            factors = [between_factor(poses[-1], v, gt[-1], true_pose, odo, odom_info)]
            history = [(p, g) for p, g in zip(poses, gt) if p.id <= v.id - cfg.lc_min_gap]
            if v.id % cfg.lc_stride:
                history = []
            for old in closure_targets(true_pose, history, cfg.lc_radius, cfg.max_closures):
                z = se2_between(gt[old.id], true_pose) + rng.normal(0.0, cfg.lc_sigma)
                factors.append(between_factor(old, v, gt[old.id], true_pose, z, lc_info))
            gt.append(true_pose)
            poses.append(v)
            infer(UpdateGraph([v], factors, {v: true_pose.copy()}))

    summary = summarize(logs, beliefs, names, nnz_before_final_reorder)
    return ScenarioResult(cfg, world, logs, beliefs, summary, stream, gt)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def summarize(logs: list[SessionLog], beliefs: dict[str, SqrtBelief], names: list[str], nnz_before) -> dict:
    totals = {}
    for n in names:
        t = {
            "planning_update_fma": 0,
            "planning_affected_scalars": 0,
            "reorder_fma": 0,
            "inference_update_fma": 0,
            "inference_affected_scalars": 0,
            "backsub_fma": 0,
            "fill_in_before_final_reorder": nnz_before.get(n, 0),
            "fill_in": beliefs[n].nnz,
        }
        for s in logs:
            m = s.metrics[n]
            if s.kind == "planning":
                t["planning_update_fma"] += m.flops_fma
                t["planning_affected_scalars"] += m.affected_scalars
                t["reorder_fma"] += m.reorder_flops
            else:
                t["inference_update_fma"] += m.flops_fma
                t["inference_affected_scalars"] += m.affected_scalars
                t["backsub_fma"] += m.backsub_flops
        t["planning_total_fma"] = t["planning_update_fma"] + t["reorder_fma"]
        t["inference_total_fma"] = t["inference_update_fma"] + t["backsub_fma"]
        totals[n] = t
    base = totals.get("baseline")
    if base:
        for n, t in totals.items():
            t["planning_total_relative"] = _ratio(t["planning_total_fma"], base["planning_total_fma"])
            t["inference_total_relative"] = _ratio(t["inference_total_fma"], base["inference_total_fma"])
    chosen = [s.chosen for s in logs if s.kind == "planning"]
    return {
        "tactics": names,
        "sessions": len(logs),
        "planning_sessions": len(chosen),
        "poses": sum(1 for s in logs if s.kind == "inference"),
        "chosen": chosen,
        "totals": totals,
    }


def _ratio(a: int, b: int) -> float | None:
    return round(a / b, 6) if b else None


def write_csv(logs: list[SessionLog], stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in logs:
        for tactic, m in s.metrics.items():
            w.writerow(
                [
                    s.index,
                    s.kind,
                    tactic,
                    m.affected_scalars,
                    m.flops_fma,
                    m.flops_rot,
                    m.nnz_R,
                    m.reorder_flops,
                    m.backsub_flops,
                    m.wall_nanos,
                    "" if m.chosen is None else m.chosen,
                ]
            )


def csv_text(logs: list[SessionLog]) -> str:
    buf = io.StringIO()
    write_csv(logs, buf)
    return buf.getvalue()


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(ScenarioConfig)}


def config_dict(cfg: ScenarioConfig) -> dict:
    return asdict(cfg)
