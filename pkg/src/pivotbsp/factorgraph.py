"""Variables, whitened linear factors, assembly into Jacobian rows, and pose-graph I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .linalg import SparseRowMatrix


class GraphError(Exception):
    pass


class UnknownVariable(GraphError):
    def __init__(self, var):
        super().__init__(f"factor references unknown variable {var}")
        self.var = var


class ParseError(GraphError):
    def __init__(self, line: int, message: str = "malformed record"):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingVertex(GraphError):
    def __init__(self, vertex_id: int):
        super().__init__(f"edge references undefined vertex {vertex_id}")
        self.vertex_id = vertex_id


class NonPSDInformation(GraphError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: information matrix is not positive definite")
        self.line = line


@dataclass(frozen=True, order=True)
class VariableId:
    id: int
    dim: int = 3

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("variable dimension must be >= 1")

    def __repr__(self) -> str:
        return f"v{self.id}"


@dataclass(frozen=True)
class LinearFactor:
    """A whitened linear constraint ``sum_i blocks[i] @ dx_i = rhs``."""

    involved: tuple[VariableId, ...]
    blocks: tuple[np.ndarray, ...]
    rhs: np.ndarray

    def __post_init__(self) -> None:
        involved = tuple(self.involved)
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks)
        rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        object.__setattr__(self, "involved", involved)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "rhs", rhs)
        if len(involved) != len(blocks) or not involved:
            raise ValueError("one block per involved variable required")
        if len(set(involved)) != len(involved):
            raise ValueError("duplicate variable in factor")
        m = rhs.shape[0]
        if m < 1:
            raise ValueError("factor dimension must be >= 1")
        for var, block in zip(involved, blocks):
            if block.shape != (m, var.dim):
                raise ValueError(f"block for {var} has shape {block.shape}, expected {(m, var.dim)}")
        if not any(np.any(b) for b in blocks):
            raise ValueError("factor has no nonzero block")

    @property
    def dim(self) -> int:
        return self.rhs.shape[0]

    @classmethod
    def whitened(cls, involved, jacobians, residual, information=None) -> "LinearFactor":
        """Build a factor from raw Jacobians, pre-multiplying by the information square root."""
        residual = np.asarray(residual, dtype=float).reshape(-1)
        if information is None:
            w = np.eye(residual.shape[0])
        else:
            w = np.linalg.cholesky(np.asarray(information, dtype=float)).T
        return cls(tuple(involved), tuple(w @ np.asarray(j, dtype=float) for j in jacobians), w @ residual)

    def key(self) -> tuple:
        """Hashable fingerprint used to compare factor streams."""
        return (
            tuple(v.id for v in self.involved),
            tuple(np.round(b, 12).tobytes() for b in self.blocks),
            np.round(self.rhs, 12).tobytes(),
        )


@dataclass
class FactorGraph:
    variables: dict[VariableId, None] = field(default_factory=dict)
    factors: list[LinearFactor] = field(default_factory=list)
    values: dict[VariableId, np.ndarray] = field(default_factory=dict)

    def add_variable(self, var: VariableId, value=None) -> None:
        self.variables[var] = None
        if value is not None:
            self.values[var] = np.asarray(value, dtype=float)

    def add_factor(self, factor: LinearFactor) -> None:
        for var in factor.involved:
            if var not in self.variables:
                raise UnknownVariable(var)
        self.factors.append(factor)

    def merged(self, update: "UpdateGraph") -> "FactorGraph":
        out = FactorGraph(dict(self.variables), list(self.factors), dict(self.values))
        for var in update.new_variables:
            out.add_variable(var, update.initial_values.get(var))
        for f in update.new_factors:
            out.add_factor(f)
        return out


@dataclass
class UpdateGraph:
    """New variables and factors a hypothesis (or an inference step) adds to a base graph."""

    new_variables: list[VariableId] = field(default_factory=list)
    new_factors: list[LinearFactor] = field(default_factory=list)
    initial_values: dict[VariableId, np.ndarray] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.new_variables or self.new_factors)

    def concat(self, other: "UpdateGraph") -> "UpdateGraph":
        return UpdateGraph(
            self.new_variables + other.new_variables,
            self.new_factors + other.new_factors,
            {**self.initial_values, **other.initial_values},
        )


class StateOrder:
    """Ordered state vector with scalar column offsets."""

    __slots__ = ("sequence", "offsets", "positions", "n")

    def __init__(self, sequence: Iterable[VariableId]):
        self.sequence = tuple(sequence)
        self.positions = {v: i for i, v in enumerate(self.sequence)}
        if len(self.positions) != len(self.sequence):
            raise ValueError("duplicate variable in order")
        self.offsets = {}
        off = 0
        for v in self.sequence:
            self.offsets[v] = off
            off += v.dim
        self.n = off

    def __len__(self) -> int:
        return len(self.sequence)

    def __iter__(self):
        return iter(self.sequence)

    def __contains__(self, var) -> bool:
        return var in self.positions

    def __eq__(self, other) -> bool:
        return isinstance(other, StateOrder) and self.sequence == other.sequence

    def __repr__(self) -> str:
        return f"StateOrder({list(self.sequence)})"

    def extended(self, new_vars: Sequence[VariableId]) -> "StateOrder":
        return StateOrder(self.sequence + tuple(new_vars))

    def columns(self, var: VariableId) -> range:
        off = self.offsets[var]
        return range(off, off + var.dim)

    def variable_at_column(self) -> list[VariableId]:
        out = []
        for v in self.sequence:
            out.extend([v] * v.dim)
        return out

    def scalar_permutation(self, new: "StateOrder") -> list[int]:
        """``perm[new_col] = old_col`` taking this order to ``new``."""
        if set(new.sequence) != set(self.sequence) or len(new) != len(self):
            raise ValueError("orders cover different variables")
        perm = []
        for v in new.sequence:
            perm.extend(self.columns(v))
        return perm


def factor_rows(factors: Sequence[LinearFactor], order: StateOrder):
    """Scalar Jacobian rows (dicts) and right-hand side for ``factors`` under ``order``."""
    rows: list[dict[int, float]] = []
    rhs: list[float] = []
    offsets = order.offsets
    for f in factors:
        placed = []
        for var, block in zip(f.involved, f.blocks):
            off = offsets.get(var)
            if off is None:
                raise UnknownVariable(var)
            placed.append((off, block))
        placed.sort(key=lambda p: p[0])
        for r in range(f.dim):
            row = {}
            for off, block in placed:
                for k, v in enumerate(block[r]):
                    if v != 0.0:
                        row[off + k] = float(v)
            rows.append(row)
            rhs.append(float(f.rhs[r]))
    return rows, rhs


def assemble(graph: FactorGraph, order: StateOrder) -> tuple[SparseRowMatrix, np.ndarray]:
    """Stack all factors of ``graph`` into a Jacobian and right-hand side under ``order``."""
    if set(order.sequence) != set(graph.variables):
        missing = [v for v in graph.variables if v not in order]
        if missing:
            raise UnknownVariable(missing[0])
    rows, rhs = factor_rows(graph.factors, order)
    return SparseRowMatrix(len(rows), order.n, rows), np.array(rhs)


def involved_variables(update: UpdateGraph) -> set[VariableId]:
    """Prior-state variables touched by any of the update's factors."""
    new = set(update.new_variables)
    out: set[VariableId] = set()
    for f in update.new_factors:
        for v in f.involved:
            if v not in new:
                out.add(v)
    return out


def variable_adjacency(factors: Iterable[LinearFactor], variables: Iterable[VariableId] = ()):
    """Variable-level adjacency of the information-matrix pattern (no self loops)."""
    adj: dict[VariableId, set[VariableId]] = {v: set() for v in variables}
    for f in factors:
        for v in f.involved:
            adj.setdefault(v, set()).update(u for u in f.involved if u != v)
    return adj


# ---------------------------------------------------------------------------
# planar pose models
# ---------------------------------------------------------------------------


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def se2_between(xa, xb) -> np.ndarray:
    """Relative pose of ``xb`` expressed in the frame of ``xa``."""
    c, s = math.cos(xa[2]), math.sin(xa[2])
    dx, dy = xb[0] - xa[0], xb[1] - xa[1]
    return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(xb[2] - xa[2])])


def se2_compose(xa, delta) -> np.ndarray:
    c, s = math.cos(xa[2]), math.sin(xa[2])
    return np.array([
        xa[0] + c * delta[0] - s * delta[1],
        xa[1] + s * delta[0] + c * delta[1],
        wrap_angle(xa[2] + delta[2]),
    ])


def se2_between_jacobians(xa, xb) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(xa[2]), math.sin(xa[2])
    dx, dy = xb[0] - xa[0], xb[1] - xa[1]
    ja = np.array([
        [-c, -s, -s * dx + c * dy],
        [s, -c, -c * dx - s * dy],
        [0.0, 0.0, -1.0],
    ])
    jb = np.array([
        [c, s, 0.0],
        [-s, c, 0.0],
        [0.0, 0.0, 1.0],
    ])
    return ja, jb


def between_factor(va: VariableId, vb: VariableId, xa, xb, measured, information) -> LinearFactor:
    """Relative-pose constraint linearized at ``(xa, xb)``."""
    ja, jb = se2_between_jacobians(xa, xb)
    err = np.asarray(measured, dtype=float) - se2_between(xa, xb)
    err[2] = wrap_angle(err[2])
    return LinearFactor.whitened((va, vb), (ja, jb), err, information)


def prior_factor(var: VariableId, lin_value, mean, information) -> LinearFactor:
    err = np.asarray(mean, dtype=float) - np.asarray(lin_value, dtype=float)
    if var.dim == 3:
        err[2] = wrap_angle(err[2])
    return LinearFactor.whitened((var,), (np.eye(var.dim),), err, information)


# ---------------------------------------------------------------------------
# g2o-style text format
# ---------------------------------------------------------------------------

#: information of the anchoring prior attached to the first vertex
DEFAULT_PRIOR_INFORMATION = np.diag([1e4, 1e4, 1e4])


@dataclass
class PoseGraphData:
    vertices: dict[int, np.ndarray] = field(default_factory=dict)
    edges: list[tuple[int, int, np.ndarray, np.ndarray]] = field(default_factory=list)


def _info_from_upper(vals: Sequence[float]) -> np.ndarray:
    i11, i12, i13, i22, i23, i33 = vals
    return np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])


def read_pose_graph(stream: TextIO) -> PoseGraphData:
    data = PoseGraphData()
    pending: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(stream, start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        tag = fields[0]
        try:
            if tag == "VERTEX_SE2":
                if len(fields) != 5:
                    raise ParseError(lineno, "VERTEX_SE2 expects 4 fields")
                vid = int(fields[1])
                if vid in data.vertices:
                    raise ParseError(lineno, f"duplicate vertex {vid}")
                data.vertices[vid] = np.array([float(x) for x in fields[2:5]])
            elif tag == "EDGE_SE2":
                if len(fields) != 12:
                    raise ParseError(lineno, "EDGE_SE2 expects 11 fields")
                a, b = int(fields[1]), int(fields[2])
                meas = np.array([float(x) for x in fields[3:6]])
                info = _info_from_upper([float(x) for x in fields[6:12]])
                if not np.all(np.isfinite(info)) or np.linalg.eigvalsh(info).min() <= 0.0:
                    raise NonPSDInformation(lineno)
                data.edges.append((a, b, meas, info))
                pending.append((a, b, lineno))
            else:
                raise ParseError(lineno, f"unknown record tag {tag!r}")
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
    for a, b, _ in pending:
        for vid in (a, b):
            if vid not in data.vertices:
                raise MissingVertex(vid)
    return data


def write_pose_graph(data: PoseGraphData, stream: TextIO) -> None:
    for vid, x in data.vertices.items():
        stream.write(f"VERTEX_SE2 {vid} {float(x[0])!r} {float(x[1])!r} {float(x[2])!r}\n")
    for a, b, meas, info in data.edges:
        upper = [info[0, 0], info[0, 1], info[0, 2], info[1, 1], info[1, 2], info[2, 2]]
        nums = " ".join(repr(float(v)) for v in list(meas) + upper)
        stream.write(f"EDGE_SE2 {a} {b} {nums}\n")


def pose_graph_to_factor_graph(data: PoseGraphData, prior_information=DEFAULT_PRIOR_INFORMATION) -> FactorGraph:
    """Linearize every edge at the stored vertex values; anchor the first vertex."""
    graph = FactorGraph()
    vars_ = {vid: VariableId(vid, 3) for vid in data.vertices}
    for vid, x in data.vertices.items():
        graph.add_variable(vars_[vid], x)
    if data.vertices:
        first = next(iter(data.vertices))
        x0 = data.vertices[first]
        graph.add_factor(prior_factor(vars_[first], x0, x0, prior_information))
    for a, b, meas, info in data.edges:
        graph.add_factor(
            between_factor(vars_[a], vars_[b], data.vertices[a], data.vertices[b], meas, info)
        )
    return graph


def load_pose_graph(stream: TextIO, prior_information=DEFAULT_PRIOR_INFORMATION) -> FactorGraph:
    return pose_graph_to_factor_graph(read_pose_graph(stream), prior_information)


def values_by_id(values: Mapping[VariableId, np.ndarray]) -> dict[int, np.ndarray]:
    return {v.id: x for v, x in values.items()}
