"""Reference implementations used to cross-check the sparse machinery in tests.

Everything here is deliberately naive: dense normal equations, explicit
variable elimination, and exhaustive search over orders.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .factorgraph import FactorGraph, StateOrder, UpdateGraph, VariableId, assemble, involved_variables


@dataclass(frozen=True)
class FillPattern:
    """Per-variable sets of later-ordered variables each one depends on."""

    order: tuple[VariableId, ...]
    deps: dict[VariableId, frozenset[VariableId]]

    def __eq__(self, other) -> bool:
        return isinstance(other, FillPattern) and self.order == other.order and self.deps == other.deps

    def edge_count(self) -> int:
        return sum(len(s) for s in self.deps.values())

    def scalar_nnz(self) -> int:
        """Stored entries of a block upper-triangular factor with this pattern."""
        total = 0
        for v in self.order:
            total += v.dim * (v.dim + 1) // 2
            total += v.dim * sum(u.dim for u in self.deps[v])
        return total

    @classmethod
    def from_belief(cls, belief) -> "FillPattern":
        pat = belief.variable_pattern()
        return cls(tuple(belief.order.sequence), {v: frozenset(s) for v, s in pat.items()})


def _adjacency(graph: FactorGraph, order: Sequence[VariableId]) -> dict[VariableId, set[VariableId]]:
    adj = {v: set() for v in order}
    for f in graph.factors:
        for v in f.involved:
            adj[v].update(f.involved)
    for v in adj:
        adj[v].discard(v)
    return adj


def symbolic_eliminate(graph: FactorGraph, order: StateOrder | Sequence[VariableId]) -> FillPattern:
    seq = tuple(order)
    adj = _adjacency(graph, seq)
    deps = {}
    for v in seq:
        nbrs = adj.pop(v)
        deps[v] = frozenset(nbrs)
        for u in nbrs:
            adj[u].discard(v)
            adj[u].update(nbrs - {u})
    return FillPattern(seq, deps)


def symbolic_eliminate_from(
    previous: FillPattern, merged: FactorGraph, order: StateOrder | Sequence[VariableId], start: int
) -> FillPattern:
    """Restart elimination at position ``start``, reusing the earlier conditionals.

    The marginal on the remaining variables is the union of the reused
    conditionals' cliques restricted to later variables plus all factors that
    touch only variables from ``start`` onward.
    """
    seq = tuple(order)
    keep = seq[:start]
    rest = set(seq[start:])
    adj = {v: set() for v in seq[start:]}
    for v in keep:
        clique = [u for u in previous.deps[v] if u in rest]
        for u in clique:
            adj[u].update(clique)
    for f in merged.factors:
        if all(v in rest for v in f.involved):
            for v in f.involved:
                adj[v].update(f.involved)
    for v in adj:
        adj[v].discard(v)
    deps = {v: previous.deps[v] for v in keep}
    for v in seq[start:]:
        nbrs = adj.pop(v)
        deps[v] = frozenset(nbrs)
        for u in nbrs:
            adj[u].discard(v)
            adj[u].update(nbrs - {u})
    return FillPattern(seq, deps)


@dataclass
class DenseReference:
    r: np.ndarray
    delta: np.ndarray
    log_abs_det: float
    information: np.ndarray
    eta: np.ndarray


def dense_reference(graph: FactorGraph, order: StateOrder) -> DenseReference:
    """Cholesky of the dense normal equations; raises ``LinAlgError`` if singular."""
    a, rhs = assemble(graph, order)
    j = a.to_dense()
    lam = j.T @ j
    eta = j.T @ rhs
    lower = np.linalg.cholesky(lam)
    r = lower.T
    y = np.linalg.solve(lower, eta)
    delta = np.linalg.solve(r, y)
    return DenseReference(r, delta, float(np.sum(np.log(np.abs(np.diag(r))))), lam, eta)


def brute_force_total_affected(
    variables: Sequence[VariableId], hyps: Iterable[UpdateGraph]
) -> tuple[int, tuple[VariableId, ...]]:
    """Exhaustive minimum over orders of the summed affected-variable counts."""
    seq = tuple(variables)
    if len(seq) > 7:
        raise ValueError("brute force limited to 7 variables")
    inv_sets = [involved_variables(h) & set(seq) for h in hyps]
    best, best_order = None, seq
    for perm in itertools.permutations(seq):
        pos = {v: i for i, v in enumerate(perm)}
        total = sum(len(perm) - min(pos[v] for v in s) for s in inv_sets if s)
        if best is None or total < best:
            best, best_order = total, perm
    return (best or 0), best_order
