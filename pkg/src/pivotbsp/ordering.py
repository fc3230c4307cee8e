"""Predictive variable ordering: involvement levels, class division, fill-aware
reclassification, and constrained minimum-degree ordering.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence, Union

from .factorgraph import LinearFactor, StateOrder, UpdateGraph, VariableId, involved_variables

if TYPE_CHECKING:
    from .belief import SqrtBelief

MAX = "max"
ClassCount = Union[int, str]

#: rank of the frozen prefix in forced-incremental mode
FROZEN = -1


@dataclass
class ClassAssignment:
    level: dict[VariableId, int]
    class_of: dict[VariableId, int] = field(default_factory=dict)
    c: ClassCount | None = None

    @property
    def top(self) -> int:
        """Highest class index reachable under this assignment."""
        if self.c == MAX or self.c is None:
            return max(self.level.values(), default=0)
        return int(self.c)


class PatternGraph:
    """Symmetric variable adjacency of an information-matrix pattern."""

    def __init__(self, adjacency: Mapping[VariableId, Iterable[VariableId]] | None = None):
        self.adj: dict[VariableId, set[VariableId]] = {}
        for v, nbrs in (adjacency or {}).items():
            self.add_variable(v)
            for u in nbrs:
                self.add_edge(v, u)

    def add_variable(self, v: VariableId) -> None:
        self.adj.setdefault(v, set())

    def add_edge(self, a: VariableId, b: VariableId) -> None:
        if a == b:
            return
        self.adj.setdefault(a, set()).add(b)
        self.adj.setdefault(b, set()).add(a)

    def add_clique(self, members: Iterable[VariableId]) -> None:
        members = list(members)
        for v in members:
            s = self.adj.setdefault(v, set())
            s.update(members)
            s.discard(v)

    @classmethod
    def from_factors(cls, factors: Iterable[LinearFactor], variables: Iterable[VariableId] = ()) -> "PatternGraph":
        g = cls()
        for v in variables:
            g.add_variable(v)
        for f in factors:
            g.add_clique(f.involved)
        return g

    @classmethod
    def from_cliques(cls, cliques: Iterable[Iterable[VariableId]], variables: Iterable[VariableId] = ()) -> "PatternGraph":
        g = cls()
        for v in variables:
            g.add_variable(v)
        for c in cliques:
            g.add_clique(c)
        return g

    def neighbors(self, v: VariableId) -> set[VariableId]:
        return self.adj.get(v, set())

    def __contains__(self, v) -> bool:
        return v in self.adj

    def __len__(self) -> int:
        return len(self.adj)

    def edge_count(self) -> int:
        return sum(len(s) for s in self.adj.values()) // 2


# ---------------------------------------------------------------------------
# class division
# ---------------------------------------------------------------------------


def involvement_levels(order: StateOrder | Sequence[VariableId], hyps: Iterable[UpdateGraph]) -> ClassAssignment:
    seq = list(order)
    level = {v: 0 for v in seq}
    for h in hyps:
        for v in involved_variables(h):
            if v in level:
                level[v] += 1
    return ClassAssignment(level=level)


def _bucket(level: int, c: int, m: int) -> int:
    # min{i in 0..c : level <= i*M/c}, in exact integer arithmetic
    if level <= 0:
        return 0
    return -((-level * c) // m)


def classify(levels: ClassAssignment | Mapping[VariableId, int], c: ClassCount) -> ClassAssignment:
    level = dict(levels.level if isinstance(levels, ClassAssignment) else levels)
    if c != MAX and (not isinstance(c, int) or c < 1):
        raise ValueError("c must be a positive integer or MAX")
    m = max(level.values(), default=0)
    if c == MAX:
        class_of = dict(level)
    elif c == 1:
        # indicator of involvement: level-0 variables stay in class 0
        class_of = {v: 1 if lv > 0 else 0 for v, lv in level.items()}
    elif m == 0:
        class_of = {v: 0 for v in level}
    else:
        class_of = {v: _bucket(lv, c, m) for v, lv in level.items()}
    return ClassAssignment(level=level, class_of=class_of, c=c)


def pivot(order: StateOrder, classes: ClassAssignment) -> StateOrder:
    """Stable sort of the state by class; within-class order is preserved."""
    cls = classes.class_of
    return StateOrder(sorted(order.sequence, key=lambda v: cls[v]))


def first_involved_position(order: StateOrder | Sequence[VariableId], classes: ClassAssignment) -> int:
    seq = list(order)
    for i, v in enumerate(seq):
        if classes.level.get(v, 0) > 0:
            return i
    return len(seq)


def fill_aware_reclassify(
    pattern: PatternGraph,
    classes: ClassAssignment,
    order: StateOrder,
    force_incremental: bool = False,
) -> ClassAssignment:
    """Bump variables that connect more to higher classes than to their own or lower ones.

    Variables are scanned in state order, counting neighbours against the running
    reclassified assignment.  In forced-incremental mode the prefix before the
    first involved variable is frozen at rank ``FROZEN`` and ignored in counts.
    """
    seq = order.sequence
    star = dict(classes.class_of)
    top = classes.top
    start = first_involved_position(seq, classes) if force_incremental else 0
    for v in seq[:start]:
        star[v] = FROZEN
    for v in seq[start:]:
        conn = [0] * (top + 1)
        for u in pattern.neighbors(v):
            k = star.get(u, 0)
            if k >= 0:
                conn[k] += 1
        cur = classes.class_of[v]
        low = sum(conn[: cur + 1])
        high = sum(conn[cur + 1 :])
        while low < high:
            cur += 1
            low += conn[cur]
            high -= conn[cur]
        star[v] = cur
    return ClassAssignment(level=dict(classes.level), class_of=star, c=classes.c)


# ---------------------------------------------------------------------------
# constrained minimum degree
# ---------------------------------------------------------------------------


def constrained_min_degree(
    pattern: PatternGraph,
    constraint: Mapping[VariableId, int],
    order: Sequence[VariableId] | StateOrder | None = None,
) -> StateOrder:
    """Greedy minimum-degree elimination order respecting constraint ranks.

    All rank-``r`` variables precede every rank-``r' > r`` variable.  Within a
    rank the variable of smallest current degree in the elimination graph goes
    first, ties to the earlier position in ``order``.  Rank ``FROZEN`` variables
    keep their relative order from ``order``.
    """
    seq = list(order) if order is not None else list(pattern.adj)
    pos = {v: i for i, v in enumerate(seq)}
    if set(pos) != set(constraint):
        raise ValueError("constraint must cover exactly the ordered variables")
    adj = {v: set(u for u in pattern.neighbors(v) if u in pos) for v in seq}

    by_rank: dict[int, list[VariableId]] = {}
    for v in seq:
        by_rank.setdefault(constraint[v], []).append(v)

    out: list[VariableId] = []

    def eliminate(v):
        nbrs = adj.pop(v)
        for u in nbrs:
            s = adj[u]
            s.discard(v)
            s.update(nbrs)
            s.discard(u)
        out.append(v)
        return nbrs

    for rank in sorted(by_rank):
        members = by_rank[rank]
        if rank == FROZEN:
            for v in members:
                eliminate(v)
            continue
        live = set(members)
        heap = [(len(adj[v]), pos[v], v) for v in members]
        heapq.heapify(heap)
        while heap:
            deg, p, v = heapq.heappop(heap)
            if v not in live or deg != len(adj[v]):
                continue
            live.discard(v)
            for u in eliminate(v):
                if u in live:
                    heapq.heappush(heap, (len(adj[u]), pos[u], u))
    return StateOrder(out)


def baseline_suffix_order(
    pattern: PatternGraph,
    involved: Iterable[VariableId],
    order: Sequence[VariableId],
) -> list[VariableId]:
    """Fill-reducing order of the affected variables with involved ones constrained last."""
    inv = set(involved)
    constraint = {v: 1 if v in inv else 0 for v in order}
    return list(constrained_min_degree(pattern, constraint, order).sequence)


# ---------------------------------------------------------------------------
# full tactics
# ---------------------------------------------------------------------------


def pivot_star(
    belief: "SqrtBelief",
    hyps: Sequence[UpdateGraph],
    c: ClassCount,
    force_incremental: bool = False,
    classes: ClassAssignment | None = None,
) -> StateOrder:
    """Fill-aware ordering: classes, connectivity bumps, then constrained min degree."""
    order = belief.order
    if classes is None:
        classes = classify(involvement_levels(order, hyps), c)
    pattern = PatternGraph.from_factors(belief.factors, order.sequence)
    star = fill_aware_reclassify(pattern, classes, order, force_incremental)
    new = constrained_min_degree(pattern, star.class_of, order)
    if force_incremental:
        j = first_involved_position(order, classes)
        assert new.sequence[:j] == order.sequence[:j]
    return new


def pivot_order(
    belief: "SqrtBelief",
    hyps: Sequence[UpdateGraph],
    c: ClassCount,
    fill_aware: bool = False,
    force_incremental: bool = False,
    classes: ClassAssignment | None = None,
) -> StateOrder:
    """Compute the reordering for any tactic variant; ``classes`` overrides the level-based division."""
    if fill_aware:
        return pivot_star(belief, hyps, c, force_incremental, classes)
    if classes is None:
        classes = classify(involvement_levels(belief.order, hyps), c)
    return pivot(belief.order, classes)


def total_affected(order: Sequence[VariableId], hyps: Iterable[UpdateGraph]) -> int:
    """Sum over hypotheses of prior-state variables from the first involved one onward."""
    seq = list(order)
    pos = {v: i for i, v in enumerate(seq)}
    total = 0
    for h in hyps:
        inv = [pos[v] for v in involved_variables(h) if v in pos]
        if inv:
            total += len(seq) - min(inv)
    return total
