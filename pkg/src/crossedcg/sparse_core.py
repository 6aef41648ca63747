"""Sparse storage, design matrices and posterior precision assembly.

Everything in here is plumbing shared by the factorization, CG and spectral
modules: a small immutable CSR type, the categorical design of a crossed
random effects model, the prior/likelihood description of a Gaussian
conditional, and flop-counted kernels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DimensionError",
    "SingularPreconditionerError",
    "FlopCounter",
    "SparseMat",
    "FactorDesign",
    "BlockPrior",
    "PrecisionModel",
    "build_design_matrix",
    "assemble_precision",
    "spmv",
    "jacobi_scale",
    "sample_prior_precision_gaussian",
    "PrecisionOperator",
    "precision_diagonal",
]


class DimensionError(ValueError):
    pass


class SingularPreconditionerError(ValueError):
    pass


@dataclass
class FlopCounter:
    """Caller-owned flop accumulator (one flop per scalar add/mul/div/sqrt)."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def _tick(flops: FlopCounter | None, n: int) -> None:
    if flops is not None:
        flops.add(n)


@dataclass(frozen=True, eq=False)
class SparseMat:
    """Row-compressed sparse matrix with sorted column indices.

    Symmetric matrices store both triangles.
    """

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        offs = np.asarray(self.row_offsets, dtype=np.int64)
        idx = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if offs.shape != (self.rows + 1,) or offs[0] != 0 or offs[-1] != idx.size:
            raise ValueError("row_offsets must have rows+1 entries ending at nnz")
        if idx.size != vals.size:
            raise ValueError("col_indices and values differ in length")
        if np.any(np.diff(offs) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.cols:
                raise ValueError("column index out of range")
            # strictly increasing within each row
            step = np.diff(idx)
            row_start = np.zeros(idx.size, dtype=bool)
            row_start[offs[:-1][offs[:-1] < idx.size]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within rows")
        for name, arr in (("row_offsets", offs), ("col_indices", idx), ("values", vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    # -- construction -------------------------------------------------
    @classmethod
    def from_scipy(cls, A, symmetric: bool = False) -> "SparseMat":
        A = sp.csr_matrix(A, dtype=np.float64, copy=True)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.shape[0], A.shape[1], A.indptr, A.indices, A.data, symmetric)

    @classmethod
    def from_triplets(cls, rows, cols, i, j, v, symmetric: bool = False) -> "SparseMat":
        """Build from COO triplets; duplicate (i, j) pairs are summed."""
        A = sp.coo_matrix((np.asarray(v, float), (np.asarray(i), np.asarray(j))), shape=(rows, cols))
        return cls.from_scipy(A.tocsr(), symmetric)

    @classmethod
    def from_dense(cls, M, symmetric: bool | None = None) -> "SparseMat":
        M = np.asarray(M, dtype=np.float64)
        if symmetric is None:
            symmetric = M.shape[0] == M.shape[1] and np.array_equal(M, M.T)
        return cls.from_scipy(sp.csr_matrix(M), symmetric)

    @classmethod
    def identity(cls, n: int) -> "SparseMat":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n), True)

    @classmethod
    def diagonal_matrix(cls, d) -> "SparseMat":
        d = np.asarray(d, float)
        return cls(d.size, d.size, np.arange(d.size + 1), np.arange(d.size), d, True)

    # -- views ----------------------------------------------------------
    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=self.shape)

    @cached_property
    def csr_t(self) -> sp.csr_matrix:
        """Transpose in CSR form, kept for repeated ``A^T x`` products."""
        return self.csr.T.tocsr()

    @cached_property
    def squared_t(self) -> sp.csr_matrix:
        """Elementwise square of the transpose, for diagonals of ``A^T W A``."""
        return self.csr_t.multiply(self.csr_t).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def transpose(self) -> "SparseMat":
        return SparseMat.from_scipy(self.csr.T.tocsr(), self.symmetric)

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal()

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def get(self, i: int, j: int) -> float:
        cols, vals = self.row(i)
        k = np.searchsorted(cols, j)
        return float(vals[k]) if k < cols.size and cols[k] == j else 0.0

    def is_symmetric(self) -> bool:
        """Transpose-compare check of structure and values."""
        if self.rows != self.cols:
            return False
        diff = (self.csr - self.csr.T).tocsr()
        diff.eliminate_zeros()
        return diff.nnz == 0

    def lower(self) -> "SparseMat":
        return SparseMat.from_scipy(sp.tril(self.csr).tocsr())

    def permuted(self, order) -> "SparseMat":
        """Return P A P^T where row k of the result is row order[k] of A."""
        order = np.asarray(order)
        return SparseMat.from_scipy(self.csr[order][:, order], self.symmetric)


# ---------------------------------------------------------------------------
# Designs


@dataclass(frozen=True, eq=False)
class FactorDesign:
    """Categorical design of a crossed random effects model.

    ``assignments[i, k]`` is the zero-based level of factor ``k`` for observation
    ``i``. Factors without slope covariates carry a random intercept
    (``w_{i,k} = 1``). ``fixed`` holds the fixed-effect covariates
    (default: a single intercept column).
    """

    G: tuple[int, ...]
    assignments: np.ndarray
    slope_covariates: tuple[np.ndarray | None, ...] | None = None
    fixed: np.ndarray | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        G = tuple(int(g) for g in self.G)
        assignments = np.asarray(self.assignments, dtype=np.int64)
        if assignments.ndim != 2 or assignments.shape[1] != len(G):
            raise ValueError(f"assignments must be an N x {len(G)} table")
        N = assignments.shape[0]
        for k, g in enumerate(G):
            col = assignments[:, k]
            if N and (col.min() < 0 or col.max() >= g):
                raise ValueError(f"factor {k}: level index outside [0, {g})")
            if np.bincount(col, minlength=g).min(initial=1) == 0 or (N == 0 and g > 0):
                raise ValueError(f"factor {k}: every level must be observed at least once")
        slope_covariates = self.slope_covariates
        if slope_covariates is not None:
            if len(slope_covariates) != len(G):
                raise ValueError("slope_covariates must list one entry (or None) per factor")
            fixed_slope_covariates = []
            for k, w in enumerate(slope_covariates):
                if w is None:
                    fixed_slope_covariates.append(None)
                    continue
                w = np.asarray(w, dtype=np.float64)
                if w.ndim == 1:
                    w = w[:, None]
                if w.shape[0] != N:
                    raise DimensionError(f"slope covariates of factor {k} have {w.shape[0]} rows, expected {N}")
                fixed_slope_covariates.append(w)
            slope_covariates = tuple(fixed_slope_covariates)
        fixed = self.fixed
        if fixed is not None:
            fixed = np.asarray(fixed, dtype=np.float64)
            if fixed.ndim == 1:
                fixed = fixed[:, None]
            if fixed.shape[0] != N:
                raise DimensionError(f"fixed covariates have {fixed.shape[0]} rows, expected {N}")
        assignments.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "assignments", assignments)
        object.__setattr__(self, "slope_covariates", slope_covariates)
        object.__setattr__(self, "fixed", fixed)

    @property
    def K(self) -> int:
        return len(self.G)

    @property
    def N(self) -> int:
        return int(self.assignments.shape[0])

    @property
    def slope_dims(self) -> tuple[int, ...]:
        if self.slope_covariates is None:
            return (1,) * self.K
        return tuple(1 if w is None else w.shape[1] for w in self.slope_covariates)

    @property
    def fixed_dim(self) -> int:
        return 1 if self.fixed is None else self.fixed.shape[1]

    @property
    def p(self) -> int:
        return self.fixed_dim + sum(g * d for g, d in zip(self.G, self.slope_dims))

    @property
    def is_random_intercept(self) -> bool:
        return all(d == 1 for d in self.slope_dims) and self.fixed is None and (
            self.slope_covariates is None or all(w is None for w in self.slope_covariates)
        )

    def factor_offsets(self) -> list[int]:
        """Column offset of each factor block; the fixed block starts at the last entry."""
        offs = [0]
        for g, d in zip(self.G, self.slope_dims):
            offs.append(offs[-1] + g * d)
        return offs

    def fixed_slice(self) -> slice:
        start = self.factor_offsets()[-1]
        return slice(start, start + self.fixed_dim)

    def factor_slice(self, k: int) -> slice:
        offs = self.factor_offsets()
        return slice(offs[k], offs[k + 1])

    def with_factor(self, levels_k: np.ndarray, G_k: int, name: str | None = None) -> "FactorDesign":
        """Append a random-intercept factor."""
        assignments = np.column_stack([self.assignments, np.asarray(levels_k, dtype=np.int64)])
        slope_covariates = None if self.slope_covariates is None else self.slope_covariates + (None,)
        names = None if self.names is None else self.names + (name or f"f{self.K}",)
        return FactorDesign(self.G + (int(G_k),), assignments, slope_covariates, self.fixed, names)


class CollinearityWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Priors and precision models


@dataclass(frozen=True, eq=False)
class BlockPrior:
    """Block-diagonal prior precision ``Diag(I_{G_k} (x) T_k, ..., T_0)``.

    The fixed-effect block is diagonal (zeros encode a flat prior).
    """

    G: tuple[int, ...]
    blocks: tuple[np.ndarray, ...]
    fixed: np.ndarray

    def __post_init__(self):
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in self.blocks)
        if len(blocks) != len(self.G):
            raise ValueError("one precision block per factor is required")
        for b in blocks:
            if b.shape[0] != b.shape[1] or not np.allclose(b, b.T):
                raise ValueError("factor precision blocks must be symmetric")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "fixed", np.atleast_1d(np.asarray(self.fixed, dtype=np.float64)))

    @property
    def p(self) -> int:
        return sum(g * b.shape[0] for g, b in zip(self.G, self.blocks)) + self.fixed.size

    def diagonal(self) -> np.ndarray:
        parts = [np.tile(np.diag(b), g) for g, b in zip(self.G, self.blocks)]
        return np.concatenate(parts + [self.fixed])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x, dtype=np.float64)
        off = 0
        for g, b in zip(self.G, self.blocks):
            d = b.shape[0]
            seg = x[off:off + g * d].reshape(g, d)
            out[off:off + g * d] = (seg @ b).ravel()
            off += g * d
        out[off:] = self.fixed * x[off:]
        return out

    def sqrt_apply(self, zeta: np.ndarray) -> np.ndarray:
        """Map iid standard normals to a N(0, T) draw."""
        out = np.empty_like(zeta, dtype=np.float64)
        off = 0
        for g, b in zip(self.G, self.blocks):
            d = b.shape[0]
            L = np.linalg.cholesky(b) if d > 1 else np.sqrt(b)
            seg = zeta[off:off + g * d].reshape(g, d)
            out[off:off + g * d] = (seg @ L.T).ravel()
            off += g * d
        out[off:] = np.sqrt(self.fixed) * zeta[off:]
        return out

    def to_sparse(self) -> sp.csr_matrix:
        mats = [sp.kron(sp.identity(g), sp.csr_matrix(b)) for g, b in zip(self.G, self.blocks)]
        mats.append(sp.diags(self.fixed))
        return sp.block_diag(mats, format="csr")

    def min_random_eig(self) -> float:
        return min(float(np.linalg.eigvalsh(b).min()) for b in self.blocks) if self.blocks else np.inf


@dataclass(frozen=True, eq=False)
class PrecisionModel:
    """``Q = T + tau * V^T Diag(omega) V`` with prior mean ``m0``.

    ``omega`` holds Gaussian noise weights (all ones by default) or, for
    binomial likelihoods, the current Polya-Gamma auxiliaries.
    """

    T: np.ndarray | BlockPrior
    tau: float = 1.0
    omega: np.ndarray | None = None
    m0: np.ndarray | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if isinstance(self.T, BlockPrior):
            if self.T.min_random_eig() <= 0:
                raise ValueError("factor precision blocks must be positive definite")
            if np.any(self.T.fixed < 0):
                raise ValueError("fixed-effect prior precision must be non-negative")
        else:
            T = np.atleast_1d(np.asarray(self.T, dtype=np.float64))
            if np.any(T < 0):
                raise ValueError("prior precision entries must be non-negative")
            object.__setattr__(self, "T", T)
        if self.omega is not None:
            om = np.asarray(self.omega, dtype=np.float64)
            if np.any(om < 0) or not np.all(np.isfinite(om)):
                raise ValueError("omega weights must be finite and non-negative")
            object.__setattr__(self, "omega", om)
        if self.m0 is not None:
            object.__setattr__(self, "m0", np.asarray(self.m0, dtype=np.float64))

    @property
    def p(self) -> int:
        return self.T.p if isinstance(self.T, BlockPrior) else self.T.size

    def prior_diagonal(self) -> np.ndarray:
        return self.T.diagonal() if isinstance(self.T, BlockPrior) else self.T

    def prior_matvec(self, x: np.ndarray) -> np.ndarray:
        return self.T.matvec(x) if isinstance(self.T, BlockPrior) else self.T * x

    def prior_sqrt_apply(self, zeta: np.ndarray) -> np.ndarray:
        return self.T.sqrt_apply(zeta) if isinstance(self.T, BlockPrior) else np.sqrt(self.T) * zeta

    def prior_sparse(self) -> sp.csr_matrix:
        return self.T.to_sparse() if isinstance(self.T, BlockPrior) else sp.diags(self.T, format="csr")

    def weights(self, N: int) -> np.ndarray:
        if self.omega is None:
            return np.ones(N)
        if self.omega.size != N:
            raise DimensionError(f"omega has {self.omega.size} entries, expected {N}")
        return self.omega

    def prior_mean(self) -> np.ndarray:
        return np.zeros(self.p) if self.m0 is None else self.m0


# ---------------------------------------------------------------------------
# Operations


def build_design_matrix(design: FactorDesign) -> SparseMat:
    """Stack the rows ``v_i = (z_{i,1} (x) w_{i,1}, ..., z_{i,K} (x) w_{i,K}, x_{i,0})``.

    Fixed-effect columns come last so that a fill-reducing ordering can keep
    them at the end of the elimination.
    """
    N, p = design.N, design.p
    offs = design.factor_offsets()
    dims = design.slope_dims
    rows, cols, vals = [], [], []
    obs = np.arange(N)
    for k in range(design.K):
        d = dims[k]
        base = offs[k] + design.assignments[:, k] * d
        w = None if design.slope_covariates is None else design.slope_covariates[k]
        for j in range(d):
            rows.append(obs)
            cols.append(base + j)
            vals.append(np.ones(N) if w is None else w[:, j])
    fixed = np.ones((N, 1)) if design.fixed is None else design.fixed
    for j in range(fixed.shape[1]):
        rows.append(obs)
        cols.append(np.full(N, offs[-1] + j))
        vals.append(fixed[:, j])
    if not rows:
        return SparseMat.from_triplets(N, p, [], [], [])
    return SparseMat.from_triplets(N, p, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def assemble_precision(V: SparseMat, model: PrecisionModel) -> SparseMat:
    """Form ``Q = T + tau V^T Diag(omega) V`` in sorted sparse storage."""
    if V.cols != model.p:
        raise DimensionError(f"V has {V.cols} columns but the model has dimension {model.p}")
    w = model.tau * model.weights(V.rows)
    Vs = V.csr
    Q = model.prior_sparse() + (Vs.T @ sp.diags(w) @ Vs)
    Q = sp.csr_matrix(Q)
    Q.eliminate_zeros()
    # the product is symmetric in exact arithmetic; enforce it bitwise
    Q = (Q + Q.T) * 0.5
    return SparseMat.from_scipy(Q, symmetric=True)


def spmv(A: SparseMat, x: np.ndarray, flops: FlopCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.cols,):
        raise DimensionError(f"vector of length {x.shape} does not match {A.cols} columns")
    _tick(flops, 2 * A.nnz)
    return A.csr @ x


def jacobi_scale(Q: SparseMat) -> tuple[SparseMat, np.ndarray]:
    """Return ``Diag(Q)^{-1/2} Q Diag(Q)^{-1/2}`` and ``d = diag(Q)^{1/2}``."""
    diag = Q.diagonal()
    if np.any(diag <= 0):
        bad = int(np.flatnonzero(diag <= 0)[0])
        raise SingularPreconditionerError(f"non-positive diagonal entry at index {bad}")
    d = np.sqrt(diag)
    rows = np.repeat(np.arange(Q.rows), np.diff(Q.row_offsets))
    vals = Q.values / (d[rows] * d[Q.col_indices])
    vals[rows == Q.col_indices] = 1.0
    return SparseMat(Q.rows, Q.cols, Q.row_offsets, Q.col_indices, vals, Q.symmetric), d


def sample_prior_precision_gaussian(V: SparseMat, model: PrecisionModel, rng: np.random.Generator) -> np.ndarray:
    """Draw ``z ~ N(0, Q)`` in O(N + p) as ``T^{1/2} zeta + sqrt(tau) V^T Omega^{1/2} eta``."""
    if V.cols != model.p:
        raise DimensionError(f"V has {V.cols} columns but the model has dimension {model.p}")
    zeta = rng.standard_normal(model.p)
    eta = rng.standard_normal(V.rows)
    w = np.sqrt(model.tau * model.weights(V.rows))
    return model.prior_sqrt_apply(zeta) + V.csr_t @ (w * eta)


def precision_diagonal(V: SparseMat, model: PrecisionModel) -> np.ndarray:
    """``diag(Q)`` without assembling Q."""
    return model.prior_diagonal() + V.squared_t @ (model.tau * model.weights(V.rows))


@dataclass(eq=False)
class PrecisionOperator:
    """Matrix-free ``x -> T x + tau V^T (Omega (V x))``.

    ``nnz`` is the n_Q used for flop accounting; it is computed from the
    sparsity pattern on first use unless supplied.
    """

    V: SparseMat
    model: PrecisionModel
    _nnz: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.V.cols != self.model.p:
            raise DimensionError(f"V has {self.V.cols} columns but the model has dimension {self.model.p}")
        self._w = self.model.tau * self.model.weights(self.V.rows)
        self._Vs = self.V.csr
        self._VsT = self.V.csr_t

    @property
    def shape(self) -> tuple[int, int]:
        return (self.model.p, self.model.p)

    @property
    def nnz(self) -> int:
        if self._nnz is None:
            pattern = self._Vs.copy()
            pattern.data[:] = 1.0
            Q = self.model.prior_sparse() + pattern.T @ pattern
            Q = sp.csr_matrix(Q)
            Q.eliminate_zeros()
            self._nnz = int(Q.nnz)
        return self._nnz

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.model.prior_matvec(x) + self._VsT @ (self._w * (self._Vs @ x))

    def diagonal(self) -> np.ndarray:
        return precision_diagonal(self.V, self.model)


def warn_collinear(msg: str) -> None:
    warnings.warn(msg, CollinearityWarning, stacklevel=3)


def as_index_array(values: Sequence[int] | np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.int64)
