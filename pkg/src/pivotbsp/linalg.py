"""Sparse square-root primitives built on row-merge Givens QR.

Rows are stored as ``dict[int, float]`` keyed by column.  Row dicts are never
mutated once they belong to a returned matrix, so unchanged rows can be shared
between the input and output of every operation.

All indices are 0-based.  ``j`` in :func:`partial_refactor` is the first
affected column; rows ``0..j-1`` are reused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

#: entries whose magnitude falls below this after a rotation are dropped
DROP_TOL = 1e-14
#: a diagonal below ``RANK_TOL_REL * max|input entry|`` is rank deficiency
RANK_TOL_REL = 1e-10


class LinalgError(Exception):
    pass


class RankDeficient(LinalgError):
    def __init__(self, column: int):
        super().__init__(f"rank deficient at column {column}")
        self.column = column


class InvolvedBeforeJ(LinalgError):
    def __init__(self, column: int, j: int):
        super().__init__(f"update touches column {column} < first affected column {j}")
        self.column = column
        self.j = j


class NotAPermutation(LinalgError):
    pass


@dataclass
class FlopCounter:
    """Cost proxy: Givens rotations applied and multiply-accumulates spent."""

    rotations: int = 0
    fma: int = 0

    def add(self, other: "FlopCounter") -> None:
        self.rotations += other.rotations
        self.fma += other.fma

    def copy(self) -> "FlopCounter":
        return FlopCounter(self.rotations, self.fma)


def _clean_row(pairs: Iterable[tuple[int, float]]) -> dict[int, float]:
    return {int(c): float(v) for c, v in sorted(pairs) if v != 0.0}


@dataclass
class SparseRowMatrix:
    """Row-sparse rectangular matrix (Jacobian rows)."""

    n_rows: int
    n_cols: int
    rows: list[dict[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.rows) != self.n_rows:
            raise ValueError("row count mismatch")
        for row in self.rows:
            if row and (min(row) < 0 or max(row) >= self.n_cols):
                raise ValueError("column index out of range")

    @classmethod
    def from_rows(cls, n_cols: int, rows: Iterable[Iterable[tuple[int, float]]]) -> "SparseRowMatrix":
        built = [_clean_row(r) for r in rows]
        return cls(len(built), n_cols, built)

    @classmethod
    def from_dense(cls, a) -> "SparseRowMatrix":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        rows = [{int(c): float(a[i, c]) for c in np.flatnonzero(a[i])} for i in range(a.shape[0])]
        return cls(a.shape[0], a.shape[1], rows)

    @classmethod
    def empty(cls, n_cols: int) -> "SparseRowMatrix":
        return cls(0, n_cols, [])

    def row_items(self, i: int) -> list[tuple[int, float]]:
        return sorted(self.rows[i].items())

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        for i, row in enumerate(self.rows):
            for c, v in row.items():
                out[i, c] = v
        return out

    def nonzero_columns(self) -> set[int]:
        cols: set[int] = set()
        for row in self.rows:
            cols.update(row)
        return cols


@dataclass
class SparseUpperTriangular:
    """Square upper-triangular factor stored by rows; row ``i`` starts at column ``i``."""

    n: int
    rows: list[dict[int, float]]

    def __post_init__(self) -> None:
        if len(self.rows) != self.n:
            raise ValueError("row count mismatch")

    @classmethod
    def from_dense(cls, r) -> "SparseUpperTriangular":
        r = np.asarray(r, dtype=float)
        n = r.shape[0]
        rows = [{int(c): float(r[i, c]) for c in np.flatnonzero(r[i]) if c >= i} for i in range(n)]
        return cls(n, rows)

    @classmethod
    def identity(cls, n: int) -> "SparseUpperTriangular":
        return cls(n, [{i: 1.0} for i in range(n)])

    def row_items(self, i: int) -> list[tuple[int, float]]:
        return sorted(self.rows[i].items())

    def diag(self, i: int) -> float:
        return self.rows[i].get(i, 0.0)

    @property
    def nnz(self) -> int:
        return sum(len(r) for r in self.rows)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for i, row in enumerate(self.rows):
            for c, v in row.items():
                out[i, c] = v
        return out

    def gram(self) -> np.ndarray:
        dense = self.to_dense()
        return dense.T @ dense


# ---------------------------------------------------------------------------
# row-merge kernel
# ---------------------------------------------------------------------------


def _insert(pivots, prhs, row, rhs, lo, hi, counter):
    """Rotate ``row`` into the pivot table until it is absorbed or annihilated."""
    hypot = math.hypot
    while row:
        col = min(row)
        if col > hi:
            # remnant beyond the pivot band; zero in exact arithmetic
            return
        slot = col - lo
        p = pivots[slot]
        if p is None:
            pivots[slot] = row
            prhs[slot] = rhs
            return
        a = p[col]
        b = row[col]
        r = hypot(a, b)
        c = a / r
        s = b / r
        keys = p.keys() | row.keys()
        newp = {}
        newq = {}
        for k in keys:
            x = p.get(k, 0.0)
            y = row.get(k, 0.0)
            u = c * x + s * y
            v = c * y - s * x
            if u >= DROP_TOL or u <= -DROP_TOL:
                newp[k] = u
            if v >= DROP_TOL or v <= -DROP_TOL:
                newq[k] = v
        newp[col] = r
        newq.pop(col, None)
        counter.rotations += 1
        counter.fma += 4 * len(keys)
        pr = prhs[slot]
        prhs[slot] = c * pr + s * rhs
        rhs = c * rhs - s * pr
        pivots[slot] = newp
        row = newq


def _merge(rows, rhs, lo, hi, counter, seated=0):
    """QR-factorize ``rows`` (all columns >= lo) into pivot rows lo..hi.

    The first ``seated`` rows are already triangular (row k leads at lo + k) and
    are placed without rotation; the rest are merged by leading column.
    """
    pivots: list = [None] * (hi - lo + 1)
    prhs = [0.0] * (hi - lo + 1)
    pivots[:seated] = rows[:seated]
    prhs[:seated] = rhs[:seated]
    rest = [i for i in range(seated, len(rows)) if rows[i]]
    rest.sort(key=lambda i: min(rows[i]))
    for i in rest:
        _insert(pivots, prhs, rows[i], rhs[i], lo, hi, counter)
    return pivots, prhs


def _scale(rows: Iterable[dict[int, float]]) -> float:
    m = 0.0
    for row in rows:
        for v in row.values():
            if v > m:
                m = v
            elif -v > m:
                m = -v
    return m


def _check_pivots(pivots, lo, tol):
    for k, p in enumerate(pivots):
        col = lo + k
        if p is None or abs(p.get(col, 0.0)) <= tol:
            raise RankDeficient(col)


def _as_vector(v, n: int | None = None) -> np.ndarray:
    out = np.asarray(v, dtype=float).reshape(-1)
    if n is not None and out.shape[0] != n:
        raise ValueError(f"vector length {out.shape[0]} != {n}")
    return out


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def qr_factorize(a: SparseRowMatrix, rhs, rank_tol: float | None = None):
    """Factorize ``a`` into ``R`` with the rotated right-hand side ``d``.

    Returns ``(R, d, FlopCounter)``; ``R @ x = d`` solves the least-squares
    problem ``min |a x - rhs|``.
    """
    rhs = _as_vector(rhs, a.n_rows)
    n = a.n_cols
    counter = FlopCounter()
    if n == 0:
        return SparseUpperTriangular(0, []), np.zeros(0), counter
    if a.n_rows < n:
        raise RankDeficient(a.n_rows)
    tol = (RANK_TOL_REL if rank_tol is None else rank_tol) * _scale(a.rows)
    pivots, prhs = _merge(a.rows, rhs.tolist(), 0, n - 1, counter)
    _check_pivots(pivots, 0, tol)
    return SparseUpperTriangular(n, pivots), np.array(prhs), counter


def partial_refactor(
    r: SparseUpperTriangular,
    d,
    new_rows: SparseRowMatrix,
    new_rhs,
    j: int,
    perm: Sequence[int] | None = None,
    rank_tol: float | None = None,
):
    """Fold ``new_rows`` into ``r``, recomputing only rows ``j`` onward.

    ``new_rows`` may have more columns than ``r`` (appended variables).  When
    ``perm`` is given (``perm[new_col] = old_col``, identity below ``j``), the
    affected columns are relabeled before refactorization; prefix rows keep
    their values and only have their column labels rewritten.
    """
    d = _as_vector(d, r.n)
    new_rhs = _as_vector(new_rhs, new_rows.n_rows)
    n = max(r.n, new_rows.n_cols)
    counter = FlopCounter()
    for row in new_rows.rows:
        if row:
            lead = min(row)
            if lead < j:
                raise InvolvedBeforeJ(lead, j)
    if j > r.n:
        raise ValueError("j beyond the pre-update dimension")

    inv = None
    if perm is not None:
        perm = list(perm)
        if sorted(perm) != list(range(n)):
            raise NotAPermutation("perm is not a bijection")
        if any(perm[k] != k for k in range(j)):
            raise ValueError("perm must be identity below j")
        moved = [k for k in range(j, n) if perm[k] != k]
        if moved:
            inv = [0] * n
            for new, old in enumerate(perm):
                inv[old] = new
            moved_lo = moved[0]

    seated = 0
    if inv is None:
        prefix = r.rows[:j]
        work = r.rows[j:] + new_rows.rows
        seated = r.n - j
    else:
        prefix = [
            {inv[c]: v for c, v in row.items()} if row and max(row) >= moved_lo else row
            for row in r.rows[:j]
        ]
        work = [{inv[c]: v for c, v in row.items()} for row in r.rows[j:]]
        work += [{inv[c]: v for c, v in row.items()} for row in new_rows.rows]
    work_rhs = d[j:].tolist() + new_rhs.tolist()
    if n == j:
        return SparseUpperTriangular(n, list(prefix)), d.copy(), counter
    tol = (RANK_TOL_REL if rank_tol is None else rank_tol) * _scale(work)
    pivots, prhs = _merge(work, work_rhs, j, n - 1, counter, seated)
    _check_pivots(pivots, j, tol)
    out = SparseUpperTriangular(n, list(prefix) + pivots)
    return out, np.concatenate([d[:j], prhs]), counter


def permutation_band(perm: Sequence[int]) -> tuple[int, int] | None:
    """First and last positions moved by ``perm``; ``None`` for the identity."""
    moved = [k for k, old in enumerate(perm) if k != old]
    if not moved:
        return None
    return moved[0], moved[-1]


def permute_and_refactor(r: SparseUpperTriangular, d, perm: Sequence[int], rank_tol: float | None = None):
    """Apply a column permutation ``perm[new_col] = old_col`` to ``r``.

    Only the row band between the first and last moved columns is refactored;
    rows above it are relabeled and rows below it are returned untouched.
    """
    d = _as_vector(d, r.n)
    perm = list(perm)
    if sorted(perm) != list(range(r.n)):
        raise NotAPermutation("perm is not a bijection on the columns")
    counter = FlopCounter()
    band = permutation_band(perm)
    if band is None:
        return SparseUpperTriangular(r.n, list(r.rows)), d.copy(), counter
    lo, hi = band
    inv = [0] * r.n
    for new, old in enumerate(perm):
        inv[old] = new
    prefix = [
        {inv[c]: v for c, v in row.items()} if max(row) >= lo else row
        for row in r.rows[:lo]
    ]
    work = [{inv[c]: v for c, v in row.items()} for row in r.rows[lo : hi + 1]]
    tol = (RANK_TOL_REL if rank_tol is None else rank_tol) * _scale(work)
    pivots, prhs = _merge(work, d[lo : hi + 1].tolist(), lo, hi, counter)
    _check_pivots(pivots, lo, tol)
    rows = prefix + pivots + r.rows[hi + 1 :]
    out_d = np.concatenate([d[:lo], prhs, d[hi + 1 :]])
    return SparseUpperTriangular(r.n, rows), out_d, counter


def back_substitute(r: SparseUpperTriangular, d, counter: FlopCounter | None = None, rank_tol: float = 0.0):
    """Solve ``R x = d`` by backward substitution."""
    d = _as_vector(d, r.n)
    x = [0.0] * r.n
    fma = 0
    for i in range(r.n - 1, -1, -1):
        row = r.rows[i]
        diag = row.get(i, 0.0)
        if abs(diag) <= rank_tol:
            raise RankDeficient(i)
        acc = d[i]
        for c, v in row.items():
            if c != i:
                acc -= v * x[c]
        fma += len(row)
        x[i] = acc / diag
    if counter is not None:
        counter.fma += fma
    return np.array(x)


def log_abs_det(r: SparseUpperTriangular) -> float:
    """Sum of ``ln|r_ii|``."""
    total = 0.0
    for i, row in enumerate(r.rows):
        diag = row.get(i, 0.0)
        if diag == 0.0:
            raise RankDeficient(i)
        total += math.log(abs(diag))
    return total


def same_up_to_row_sign(a: SparseUpperTriangular, b: SparseUpperTriangular, tol: float = 1e-9) -> bool:
    """Compare two factors entrywise, allowing each row to differ by a sign."""
    if a.n != b.n:
        return False
    for ra, rb in zip(a.rows, b.rows):
        sa = 1.0 if ra.get(min(ra), 0.0) >= 0 else -1.0
        sb = 1.0 if rb.get(min(rb), 0.0) >= 0 else -1.0
        scale = max((abs(v) for v in ra.values()), default=1.0)
        for k in ra.keys() | rb.keys():
            if abs(sa * ra.get(k, 0.0) - sb * rb.get(k, 0.0)) > tol * max(scale, 1.0):
                return False
    return True
