"""Factorized Gaussian belief: batch build, incremental update, reordering, MAP and entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import linalg
from .factorgraph import (
    FactorGraph,
    LinearFactor,
    StateOrder,
    UpdateGraph,
    VariableId,
    assemble,
    factor_rows,
    involved_variables,
)
from .linalg import FlopCounter, NotAPermutation, SparseRowMatrix, SparseUpperTriangular
from .ordering import PatternGraph, baseline_suffix_order

SuffixPolicy = Literal["keep", "baseline"]

LN_2PI_E = math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class Tolerances:
    gram: float = 1e-9
    entropy: float = 1e-10
    estimate: float = 1e-8


TOL = Tolerances()


@dataclass
class AffectedReport:
    """Size and cost of one refactorization.  ``j_scalar`` is a 0-based column."""

    j_scalar: int
    affected_vars: int
    affected_scalars: int
    flops: FlopCounter
    nnz_after: int

    @classmethod
    def empty(cls, n: int, nnz: int) -> "AffectedReport":
        return cls(n, 0, 0, FlopCounter(), nnz)


@dataclass
class SqrtBelief:
    order: StateOrder
    r: SparseUpperTriangular
    d: np.ndarray
    factors: list[LinearFactor]
    lin_point: dict[VariableId, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.order.n

    @property
    def nnz(self) -> int:
        return self.r.nnz

    def graph(self) -> FactorGraph:
        return FactorGraph({v: None for v in self.order}, list(self.factors), dict(self.lin_point))

    def variable_pattern(self) -> dict[VariableId, set[VariableId]]:
        """Variable-block nonzero pattern of ``r``: each variable's later dependencies."""
        owner = self.order.variable_at_column()
        out: dict[VariableId, set[VariableId]] = {v: set() for v in self.order}
        for i, row in enumerate(self.r.rows):
            v = owner[i]
            out[v].update(owner[c] for c in row)
        for v, deps in out.items():
            deps.discard(v)
        return out


def build(graph: FactorGraph, order: StateOrder) -> SqrtBelief:
    a, rhs = assemble(graph, order)
    r, d, _ = linalg.qr_factorize(a, rhs)
    lin = {v: np.asarray(graph.values.get(v, np.zeros(v.dim)), dtype=float) for v in order}
    return SqrtBelief(order, r, d, list(graph.factors), lin)


def _suffix_pattern(b: SqrtBelief, order: StateOrder, j: int, start: int, new_factors) -> PatternGraph:
    """Elimination structure of the affected block: conditionals of old rows plus new factors."""
    owner = order.variable_at_column()
    cliques: dict[VariableId, set[VariableId]] = {}
    for i in range(j, b.r.n):
        v = owner[i]
        cliques.setdefault(v, {v}).update(owner[c] for c in b.r.rows[i])
    g = PatternGraph.from_cliques(cliques.values(), order.sequence[start:])
    for f in new_factors:
        g.add_clique(f.involved)
    return g


def incremental_update(
    b: SqrtBelief,
    u: UpdateGraph,
    suffix_order_policy: SuffixPolicy = "keep",
) -> tuple[SqrtBelief, AffectedReport]:
    """Fold an update into the belief, refactoring only from the first involved variable.

    New variables are appended to the end of the order.  With the ``baseline``
    policy the affected suffix is reordered by constrained minimum degree, with
    variables touched by the new factors placed last.
    """
    for v in u.new_variables:
        if v in b.order:
            raise ValueError(f"new variable {v} already in the belief")
    order1 = b.order.extended(u.new_variables)
    inv_old = involved_variables(u)
    for v in inv_old:
        if v not in b.order:
            raise ValueError(f"update references unknown variable {v}")
    start = min((b.order.positions[v] for v in inv_old), default=len(b.order))
    j = b.order.offsets[b.order.sequence[start]] if start < len(b.order) else b.order.n

    order2 = order1
    perm = None
    if suffix_order_policy == "baseline" and len(order1) - start > 1:
        touched = {v for f in u.new_factors for v in f.involved}
        pattern = _suffix_pattern(b, order1, j, start, u.new_factors)
        suffix = baseline_suffix_order(pattern, touched, order1.sequence[start:])
        if tuple(suffix) != order1.sequence[start:]:
            order2 = StateOrder(order1.sequence[:start] + tuple(suffix))
            perm = order1.scalar_permutation(order2)
    elif suffix_order_policy not in ("keep", "baseline"):
        raise ValueError(f"unknown suffix policy {suffix_order_policy!r}")

    rows, rhs = factor_rows(u.new_factors, order1)
    new = SparseRowMatrix(len(rows), order1.n, rows)
    r2, d2, counter = linalg.partial_refactor(b.r, b.d, new, rhs, j, perm=perm)

    lin = dict(b.lin_point)
    for v in u.new_variables:
        lin[v] = np.asarray(u.initial_values.get(v, np.zeros(v.dim)), dtype=float)
    nb = SqrtBelief(order2, r2, d2, b.factors + list(u.new_factors), lin)
    report = AffectedReport(j, len(order2) - start, order2.n - j, counter, r2.nnz)
    return nb, report


def apply_order(b: SqrtBelief, new_order: StateOrder) -> tuple[SqrtBelief, AffectedReport]:
    """Re-express the belief under ``new_order``; only the moved row band is refactored."""
    if len(new_order) != len(b.order) or set(new_order.sequence) != set(b.order.sequence):
        raise NotAPermutation("new order is not a permutation of the belief order")
    perm = b.order.scalar_permutation(new_order)
    band = linalg.permutation_band(perm)
    if band is None:
        return b, AffectedReport.empty(b.n, b.nnz)
    r2, d2, counter = linalg.permute_and_refactor(b.r, b.d, perm)
    lo, hi = band
    owner = new_order.variable_at_column()
    nvars = len(set(owner[lo : hi + 1]))
    nb = SqrtBelief(new_order, r2, d2, b.factors, b.lin_point)
    return nb, AffectedReport(lo, nvars, hi - lo + 1, counter, r2.nnz)


def solve_delta(b: SqrtBelief, counter: FlopCounter | None = None) -> np.ndarray:
    return linalg.back_substitute(b.r, b.d, counter)


def map_estimate(b: SqrtBelief, counter: FlopCounter | None = None) -> dict[VariableId, np.ndarray]:
    """Linearization point plus the least-squares correction, keyed by variable."""
    delta = solve_delta(b, counter)
    out = {}
    for v in b.order:
        off = b.order.offsets[v]
        out[v] = b.lin_point[v] + delta[off : off + v.dim]
    return out


def correction(b: SqrtBelief, counter: FlopCounter | None = None) -> dict[VariableId, np.ndarray]:
    delta = solve_delta(b, counter)
    return {v: delta[b.order.offsets[v] : b.order.offsets[v] + v.dim] for v in b.order}


def entropy(b: SqrtBelief) -> float:
    """Differential entropy of the Gaussian belief."""
    return -(linalg.log_abs_det(b.r) - 0.5 * b.n * LN_2PI_E)
