"""Fill-in analysis and sparse Cholesky factorization.

Symbolic work runs on the conditional-independence graph with Python
integers as bitsets, which keeps clique insertion cheap at desk scale.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve_triangular

from .sparse_core import FlopCounter, SingularPreconditionerError, SparseMat, _tick

__all__ = [
    "NotPositiveDefiniteError",
    "CIGraph",
    "EliminationReport",
    "ci_graph",
    "min_degree_order",
    "symbolic_factor",
    "numeric_cholesky",
    "incomplete_cholesky",
    "tri_solve",
    "chol_sample",
    "CholeskySampler",
    "TriangularFactor",
    "future_set_fill",
    "cholesky_cost",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, column: int, pivot: float):
        super().__init__(f"non-positive pivot {pivot:.3e} at column {column}")
        self.column = column
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class CIGraph:
    """Undirected graph on ``p`` vertices with sorted neighbour arrays."""

    p: int
    adjacency: tuple[np.ndarray, ...]

    @property
    def n_edges(self) -> int:
        return sum(a.size for a in self.adjacency) // 2

    def degree(self) -> np.ndarray:
        return np.array([a.size for a in self.adjacency], dtype=np.int64)

    def bitsets(self) -> list[int]:
        return [_to_bits(a) for a in self.adjacency]

    @classmethod
    def from_edges(cls, p: int, edges: Iterable[tuple[int, int]]) -> "CIGraph":
        nbrs: list[set[int]] = [set() for _ in range(p)]
        for a, b in edges:
            if a != b:
                nbrs[a].add(b)
                nbrs[b].add(a)
        return cls(p, tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs))

    def relabel(self, order: Sequence[int]) -> "CIGraph":
        """Graph whose vertex ``k`` is vertex ``order[k]`` of this one."""
        order = np.asarray(order)
        pos = np.empty(self.p, dtype=np.int64)
        pos[order] = np.arange(self.p)
        return CIGraph(self.p, tuple(np.sort(pos[self.adjacency[v]]) for v in order))


def _to_bits(indices) -> int:
    if len(indices) == 0:
        return 0
    idx = np.asarray(indices, dtype=np.int64)
    buf = np.zeros(int(idx.max()) // 8 + 1, dtype=np.uint8)
    np.bitwise_or.at(buf, idx // 8, (1 << (idx % 8)).astype(np.uint8))
    return int.from_bytes(buf.tobytes(), "little")


def _from_bits(x: int) -> np.ndarray:
    if x == 0:
        return np.empty(0, dtype=np.int64)
    raw = np.frombuffer(x.to_bytes((x.bit_length() + 7) // 8, "little"), dtype=np.uint8)
    return np.flatnonzero(np.unpackbits(raw, bitorder="little"))


def ci_graph(Q: SparseMat) -> CIGraph:
    """Edges are the structurally non-zero off-diagonal entries of ``Q``."""
    if Q.rows != Q.cols:
        raise ValueError("Q must be square")
    A = Q.csr.copy()
    A.eliminate_zeros()
    pattern = A.astype(bool)
    if (pattern != pattern.T).nnz:
        raise ValueError("Q has an asymmetric sparsity pattern")
    pattern = sp.csr_matrix(pattern)
    pattern.setdiag(False)
    pattern.eliminate_zeros()
    pattern.sort_indices()
    adj = tuple(pattern.indices[pattern.indptr[i]:pattern.indptr[i + 1]].astype(np.int64)
                for i in range(Q.rows))
    return CIGraph(Q.rows, adj)


def min_degree_order(graph: CIGraph, pin_last: Iterable[int] = ()) -> np.ndarray:
    """Greedy minimum-degree elimination order on the elimination graph.

    Ties go to the smallest original index. Vertices in ``pin_last`` are
    eliminated after all others, in the order given.
    """
    p = graph.p
    pinned = list(dict.fromkeys(int(v) for v in pin_last))
    if any(v < 0 or v >= p for v in pinned):
        raise ValueError("pinned vertex outside the graph")
    adj = graph.bitsets()
    deg = graph.degree().astype(np.float64)
    deg[pinned] = np.inf
    alive = (1 << p) - 1
    order = []
    for _ in range(p - len(pinned)):
        v = int(np.argmin(deg))
        order.append(v)
        deg[v] = np.inf
        alive &= ~(1 << v)
        nb = adj[v] & alive
        adj[v] = 0
        for u in _from_bits(nb):
            u = int(u)
            adj[u] = (adj[u] | nb) & ~(1 << u) & alive
            if np.isfinite(deg[u]):
                deg[u] = adj[u].bit_count()
    return np.array(order + pinned, dtype=np.int64)


def cholesky_cost(counts: np.ndarray) -> int:
    """Flops of the column recursion: sqrt, ``n'`` divisions, ``n'(1+n')`` updates."""
    n_sub = np.asarray(counts, dtype=np.int64) - 1
    return int(np.sum(1 + n_sub + n_sub * (1 + n_sub)))


@dataclass(frozen=True, eq=False)
class EliminationReport:
    order: np.ndarray
    per_column_counts: np.ndarray
    total_nl: int
    predicted_flops: int
    lower_bound: float
    upper_bound: float
    dense_fallback: bool = False
    pattern: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "order": [int(v) for v in self.order],
            "n_l_per_column": [int(c) for c in self.per_column_counts],
            "n_l_total": int(self.total_nl),
            "flops_predicted": int(self.predicted_flops),
            "bounds": {"lower": float(self.lower_bound), "upper": float(self.upper_bound)},
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def symbolic_factor(graph: CIGraph, order: Sequence[int], keep_pattern: bool = False) -> EliminationReport:
    """Predict the non-zero structure of the Cholesky factor under ``order``.

    Eliminating a vertex joins its later neighbours into a clique. Only the
    earliest of those neighbours needs to receive the clique explicitly: it
    is eliminated next among them and passes the clique on, so the
    resulting column structures equal those of full clique insertion.
    ``per_column_counts[m]`` is one plus the number of later neighbours of
    the ``m``-th eliminated vertex at elimination time.

    Once the remaining vertices form a clique the tail is filled in
    analytically and ``dense_fallback`` is set.
    """
    order = np.asarray(order, dtype=np.int64)
    p = graph.p
    if order.shape != (p,) or not np.array_equal(np.sort(order), np.arange(p)):
        raise ValueError("order must be a permutation of the vertices")
    adj = graph.relabel(order).bitsets()
    counts = np.empty(p, dtype=np.int64)
    pattern = [] if keep_pattern else None
    dense = False
    m = 0
    while m < p:
        later = adj[m] >> (m + 1) << (m + 1)
        c = later.bit_count()
        counts[m] = 1 + c
        if keep_pattern:
            pattern.append(_from_bits(later))
        if c == p - 1 - m and m < p - 1 and not keep_pattern:
            counts[m + 1:] = np.arange(p - m - 1, 0, -1)
            dense = m + 1 < p
            break
        if c:
            parent = (later & -later).bit_length() - 1
            adj[parent] |= later & ~(1 << parent)
        m += 1
    total = int(counts.sum())
    return EliminationReport(
        order=order,
        per_column_counts=counts,
        total_nl=total,
        predicted_flops=cholesky_cost(counts),
        lower_bound=total**2 / p if p else 0.0,
        upper_bound=float(total) ** 1.5,
        dense_fallback=dense,
        pattern=tuple(pattern) if keep_pattern else None,
    )


def future_set_fill(graph: CIGraph, order: Sequence[int]) -> set[tuple[int, int]]:
    """Strictly lower non-zero positions ``(i, j)``, ``i > j``, of the factor.

    Position ``(i, j)`` is non-zero exactly when some path joins the
    ``j``-th and ``i``-th eliminated vertices using only vertices eliminated
    before the ``j``-th. Found by breadth-first search; meant for small graphs.
    """
    g = graph.relabel(order)
    fill = set()
    for j in range(g.p):
        seen = {j}
        queue = deque([j])
        while queue:
            v = queue.popleft()
            for u in g.adjacency[v]:
                u = int(u)
                if u in seen:
                    continue
                seen.add(u)
                if u < j:
                    queue.append(u)
                elif u > j:
                    fill.add((u, j))
    return fill


def _lower_columns(Q: SparseMat, order: np.ndarray | None):
    """Permuted lower triangle of ``Q`` by columns (CSC arrays)."""
    A = Q.csr if order is None else Q.csr[order][:, order]
    A = sp.tril(A, format="csc")
    A.sort_indices()
    return A


def _left_looking(A: sp.csc_matrix, allowed=None, absolute_pivot: bool = False,
                  flops: FlopCounter | None = None) -> SparseMat:
    p = A.shape[0]
    col_rows: list[np.ndarray] = [None] * p
    col_vals: list[np.ndarray] = [None] * p
    ptr = np.zeros(p, dtype=np.int64)
    pending: list[list[int]] = [[] for _ in range(p)]
    w = np.zeros(p)
    count = 0
    for j in range(p):
        lo, hi = A.indptr[j], A.indptr[j + 1]
        rows_a = A.indices[lo:hi]
        w[rows_a] = A.data[lo:hi]
        parts = [rows_a]
        for k in pending[j]:
            pos = ptr[k]
            rk = col_rows[k][pos:]
            vk = col_vals[k][pos:]
            w[rk] -= vk * vk[0]
            count += 2 * rk.size
            parts.append(rk)
            ptr[k] = pos + 1
            if pos + 1 < col_rows[k].size:
                pending[int(col_rows[k][pos + 1])].append(k)
        pending[j] = []
        rows = np.unique(np.concatenate(parts)) if len(parts) > 1 else rows_a.astype(np.int64)
        if rows.size == 0 or rows[0] != j:
            rows = np.concatenate([[j], rows[rows > j]])
        if allowed is not None:
            rows = rows[np.isin(rows, allowed[j], assume_unique=True)]
        pivot = w[j]
        if absolute_pivot:
            pivot = abs(pivot)
            if pivot == 0.0 or not np.isfinite(pivot):
                raise SingularPreconditionerError(f"zero pivot at column {j} of the incomplete factor")
        elif not pivot > 0:
            raise NotPositiveDefiniteError(j, float(pivot))
        diag = np.sqrt(pivot)
        vals = w[rows] / diag
        vals[0] = diag
        count += rows.size
        w[rows] = 0.0
        if len(parts) > 1:
            w[np.concatenate(parts)] = 0.0
        col_rows[j], col_vals[j] = rows, vals
        if rows.size > 1:
            pending[int(rows[1])].append(j)
            ptr[j] = 1
    _tick(flops, count)
    nnz = np.array([r.size for r in col_rows], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(nnz)])
    L = sp.csc_matrix((np.concatenate(col_vals), np.concatenate(col_rows), indptr), shape=(p, p))
    return SparseMat.from_scipy(L.tocsr())


def numeric_cholesky(Q: SparseMat, order: Sequence[int] | None = None,
                     flops: FlopCounter | None = None) -> SparseMat:
    """Left-looking sparse Cholesky of ``P Q P^T`` where row ``k`` of ``PQP^T`` is row ``order[k]`` of ``Q``.

    The column structures are the unions of the rows touched by earlier
    columns, so the stored pattern is structural: entries that cancel
    numerically are kept as explicit zeros. The flop count matches
    :func:`cholesky_cost` of the symbolic counts.
    """
    order = None if order is None else np.asarray(order, dtype=np.int64)
    return _left_looking(_lower_columns(Q, order), flops=flops)


def incomplete_cholesky(Q: SparseMat, sparsity: Sequence[np.ndarray] | SparseMat | None = None,
                        order: Sequence[int] | None = None, flops: FlopCounter | None = None) -> SparseMat:
    """Cholesky factor restricted to a lower-triangular pattern.

    ``sparsity`` gives the allowed rows of each column (or a matrix whose
    lower-triangular support is used); the default is the support of ``Q``
    itself. Negative pivots are replaced by their absolute value.
    """
    order = None if order is None else np.asarray(order, dtype=np.int64)
    A = _lower_columns(Q, order)
    if sparsity is None:
        P = A
    elif isinstance(sparsity, SparseMat):
        P = sp.tril(sparsity.csr, format="csc")
        P.sort_indices()
    else:
        P = None
        allowed = [np.union1d(np.asarray(r, dtype=np.int64), [j]) for j, r in enumerate(sparsity)]
    if P is not None:
        allowed = [np.union1d(P.indices[P.indptr[j]:P.indptr[j + 1]], [j]).astype(np.int64)
                   for j in range(A.shape[0])]
    return _left_looking(A, allowed=allowed, absolute_pivot=True, flops=flops)


def tri_solve(L: SparseMat, b: np.ndarray, transposed: bool = False,
              flops: FlopCounter | None = None) -> np.ndarray:
    """Solve ``L x = b`` (or ``L^T x = b``) by substitution, ``2 n_L - p`` flops."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (L.rows,):
        raise ValueError(f"right-hand side of length {b.shape} does not match {L.rows}")
    diag = L.diagonal()
    if np.any(diag == 0):
        raise ZeroDivisionError(f"zero diagonal entry at row {int(np.flatnonzero(diag == 0)[0])}")
    _tick(flops, 2 * L.nnz - L.rows)
    if transposed:
        return spsolve_triangular(L.csr.T.tocsr(), b, lower=False)
    return spsolve_triangular(L.csr, b, lower=True)


class TriangularFactor:
    """Reusable substitution solves with a fixed lower-triangular ``L``.

    Wraps SuperLU with the natural column order and diagonal pivoting, which
    performs no elimination on a triangular matrix; each solve is then a
    single compiled substitution pass.
    """

    def __init__(self, L: SparseMat):
        diag = L.diagonal()
        if np.any(diag == 0):
            raise ZeroDivisionError(f"zero diagonal entry at row {int(np.flatnonzero(diag == 0)[0])}")
        self.L = L
        self._lu = splu(L.csr.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0,
                        options={"SymmetricMode": True})

    @property
    def flops_per_solve(self) -> int:
        return 2 * self.L.nnz - self.L.rows

    def solve(self, b: np.ndarray, transposed: bool = False, flops: FlopCounter | None = None) -> np.ndarray:
        _tick(flops, self.flops_per_solve)
        return self._lu.solve(np.asarray(b, dtype=np.float64), trans="T" if transposed else "N")


def chol_sample(L: SparseMat | TriangularFactor, m: np.ndarray, order: Sequence[int] | None,
                rng: np.random.Generator, flops: FlopCounter | None = None) -> np.ndarray:
    """Draw ``theta ~ N(Q^{-1} m, Q^{-1})`` from ``PQP^T = LL^T``: ``Lw = Pm``, ``L^T u = w + z``."""
    m = np.asarray(m, dtype=np.float64)
    n = L.L.rows if isinstance(L, TriangularFactor) else L.rows
    order = np.arange(n) if order is None else np.asarray(order)
    z = rng.standard_normal(n)
    if isinstance(L, TriangularFactor):
        w = L.solve(m[order], flops=flops)
        u = L.solve(w + z, transposed=True, flops=flops)
    else:
        w = tri_solve(L, m[order], flops=flops)
        u = tri_solve(L, w + z, transposed=True, flops=flops)
    theta = np.empty_like(u)
    theta[order] = u
    return theta


class CholeskySampler:
    """Gaussian sampler reusing one fill-reducing order across matrices with a fixed pattern.

    The numeric factor is cached and reused while the matrix values are unchanged.
    """

    def __init__(self, pin_last: Iterable[int] = ()):
        self.pin_last = tuple(pin_last)
        self.order: np.ndarray | None = None
        self.report: EliminationReport | None = None
        self._pattern_key = None
        self._value_key = None
        self._factor: TriangularFactor | None = None

    def factor(self, Q: SparseMat, flops: FlopCounter | None = None) -> TriangularFactor:
        key = (Q.rows, Q.row_offsets.tobytes(), Q.col_indices.tobytes())
        if key != self._pattern_key:
            graph = ci_graph(Q)
            self.order = min_degree_order(graph, self.pin_last)
            self.report = symbolic_factor(graph, self.order)
            self._pattern_key = key
            self._value_key = None
        vkey = Q.values.tobytes()
        if vkey != self._value_key:
            self._factor = TriangularFactor(numeric_cholesky(Q, self.order, flops=flops))
            self._value_key = vkey
        return self._factor

    def sample(self, Q: SparseMat, m: np.ndarray, rng: np.random.Generator,
               flops: FlopCounter | None = None) -> np.ndarray:
        return chol_sample(self.factor(Q, flops=flops), m, self.order, rng, flops=flops)
