"""Spectra of Jacobi-scaled precision matrices and normalized adjacency matrices.

Eigenvalues are computed densely; every function here is meant for
``p`` of at most a few thousand.  Indices in docstrings follow the usual
one-based convention ``mu_1 <= ... <= mu_p``.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .designs import component_count, gen_biregular_bipartite, gen_er_bipartite
from .sparse_core import (
    FactorDesign,
    PrecisionModel,
    assemble_precision,
    build_design_matrix,
    jacobi_scale,
)

__all__ = [
    "SizeCapError",
    "SpectrumReport",
    "PairwiseReport",
    "Theorem3Report",
    "LemmaBound",
    "BoundCheckResult",
    "dense_sym_eig",
    "tridiagonalize",
    "tridiagonal_eigvalsh",
    "likelihood_gram",
    "scaled_gram",
    "scaled_precision",
    "normalized_adjacency_r",
    "pair_normalized_adjacency",
    "effective_condition_number",
    "check_theorem3",
    "interlace_bound",
    "pairwise_components",
    "max_pairwise_components",
    "count_near",
    "lambda_star",
    "strong_connectivity_check",
    "biregular_bound",
    "biregular_bound_check",
    "er_epsilon",
    "er_bound_check",
    "spectrum_histogram",
    "write_histogram_csv",
]

MAX_DENSE_DIM = 4000


class SizeCapError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Eigensolvers


def tridiagonalize(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Householder reduction of a symmetric matrix; returns (diagonal, subdiagonal)."""
    A = np.array(M, dtype=np.float64, copy=True)
    n = A.shape[0]
    for k in range(n - 2):
        x = A[k + 1:, k]
        nx = np.linalg.norm(x)
        if nx == 0.0:
            continue
        alpha = -math.copysign(nx, x[0])
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        sub = A[k + 1:, k + 1:]
        pv = sub @ v
        q = pv - (v @ pv) * v
        sub -= 2.0 * (np.outer(v, q) + np.outer(q, v))
        A[k + 1, k] = A[k, k + 1] = alpha
        A[k + 2:, k] = 0.0
        A[k, k + 2:] = 0.0
    return np.diag(A).copy(), np.diag(A, -1).copy()


def tridiagonal_eigvalsh(diag: np.ndarray, sub: np.ndarray, max_iter: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric tridiagonal matrix by implicit-shift QL."""
    d = np.array(diag, dtype=np.float64)
    n = d.size
    e = np.zeros(n)
    e[: n - 1] = sub
    eps = np.finfo(float).eps
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                if abs(e[m]) <= eps * (abs(d[m]) + abs(d[m + 1])):
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise np.linalg.LinAlgError(f"QL iteration did not converge for eigenvalue {l}")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return np.sort(d)


def dense_sym_eig(M, method: str = "lapack", max_dim: int = MAX_DENSE_DIM) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending.

    ``method="lapack"`` calls the LAPACK symmetric driver; ``"ql"`` uses
    :func:`tridiagonalize` followed by :func:`tridiagonal_eigvalsh`.
    """
    if sp.issparse(M):
        M = M.toarray()
    elif hasattr(M, "to_dense"):
        M = M.to_dense()
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    n = M.shape[0]
    if n > max_dim:
        raise SizeCapError(f"dense eigensolver capped at dimension {max_dim}, got {n}")
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if np.abs(M - M.T).max(initial=0.0) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    if n == 0:
        return np.empty(0)
    if method == "lapack":
        return np.linalg.eigvalsh(M)
    if method == "ql":
        return tridiagonal_eigvalsh(*tridiagonalize(M))
    raise ValueError(f"unknown method '{method}'")


# ---------------------------------------------------------------------------
# Matrices


def _require_intercepts(design: FactorDesign) -> None:
    if not design.is_random_intercept:
        raise ValueError("spectral checks need a random-intercept design")


def likelihood_gram(design: FactorDesign) -> np.ndarray:
    """``U = V^T V`` as a dense array."""
    V = build_design_matrix(design).csr
    return (V.T @ V).toarray()


def _scale(M: np.ndarray) -> np.ndarray:
    d = 1.0 / np.sqrt(np.diag(M))
    out = M * d[:, None] * d[None, :]
    np.fill_diagonal(out, 1.0)
    return out


def scaled_gram(design: FactorDesign) -> np.ndarray:
    """``Diag(U)^{-1/2} U Diag(U)^{-1/2}``."""
    return _scale(likelihood_gram(design))


def scaled_precision(design: FactorDesign, model: PrecisionModel) -> np.ndarray:
    """Dense Jacobi-scaled precision matrix."""
    Qbar, _ = jacobi_scale(assemble_precision(build_design_matrix(design), model))
    return Qbar.to_dense()


def _random_block_counts(design: FactorDesign) -> np.ndarray:
    U = likelihood_gram(design)
    r = design.p - design.fixed_dim
    return U[:r, :r]


def normalized_adjacency_r(design: FactorDesign) -> np.ndarray:
    """``(D^(r))^{-1/2} A^(r) (D^(r))^{-1/2}`` on the random-effect coordinates.

    ``A^(r)`` holds co-occurrence counts between levels of different
    factors and ``D^(r)`` its row sums, which must equal ``(K-1)`` times the
    level counts.
    """
    _require_intercepts(design)
    if design.K < 2:
        raise ValueError("need at least two factors")
    Ur = _random_block_counts(design)
    A = Ur.copy()
    np.fill_diagonal(A, 0.0)
    D = A.sum(axis=1)
    if np.any(D == 0):
        raise ValueError(f"isolated level at random-effect coordinate {int(np.flatnonzero(D == 0)[0])}")
    if not np.array_equal(D, (design.K - 1) * np.diag(Ur)):
        raise AssertionError("row sums of A^(r) differ from (K-1) Diag(U^(r))")
    s = 1.0 / np.sqrt(D)
    return A * s[:, None] * s[None, :]


def _pair_counts(design: FactorDesign, k: int, h: int, binary: bool = False) -> np.ndarray:
    C = np.zeros((design.G[k], design.G[h]))
    np.add.at(C, (design.assignments[:, k], design.assignments[:, h]), 1.0)
    return (C > 0).astype(float) if binary else C


def pair_normalized_adjacency(design: FactorDesign, k: int, h: int, binary: bool = False) -> np.ndarray:
    """``M^{-1/2} A^(k,h) M^{-1/2}`` for the bipartite graph of factors ``k`` and ``h``."""
    C = _pair_counts(design, k, h, binary)
    Gk, Gh = C.shape
    A = np.zeros((Gk + Gh, Gk + Gh))
    A[:Gk, Gk:] = C
    A[Gk:, :Gk] = C.T
    s = 1.0 / np.sqrt(A.sum(axis=1))
    return A * s[:, None] * s[None, :]


# ---------------------------------------------------------------------------
# Reports


def effective_condition_number(eigs, s: int, r: int) -> float:
    """``kappa_{s+1, p-r} = mu_{p-r} / mu_{s+1}`` from ascending eigenvalues."""
    eigs = np.asarray(eigs, dtype=np.float64)
    p = eigs.size
    if s < 0 or r < 0 or s + r >= p:
        raise ValueError(f"need 0 <= s, r and s + r < p (s={s}, r={r}, p={p})")
    lo = eigs[s]
    if not lo > 0:
        raise ValueError(f"mu_{s + 1} = {lo} is not positive")
    return float(eigs[p - r - 1] / lo)


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    matrix_kind: str
    effective_cns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eigenvalues = np.sort(np.asarray(self.eigenvalues, dtype=np.float64))

    def kappa(self, s: int, r: int) -> float:
        if (s, r) not in self.effective_cns:
            self.effective_cns[(s, r)] = effective_condition_number(self.eigenvalues, s, r)
        return self.effective_cns[(s, r)]


@dataclass
class Theorem3Report:
    K: int
    zero_count: int
    top_scaled_gram: float
    mu_K: float
    mu_K_bound: float
    mu_p: float
    mu_p_interval: tuple[float, float]
    gram_eigs: np.ndarray = field(repr=False)
    qbar_eigs: np.ndarray = field(repr=False)

    @property
    def checks(self) -> dict[str, bool]:
        K = self.K
        return {
            "zero_count": self.zero_count == K,
            "top_gram": abs(self.top_scaled_gram - (K + 1)) <= 1e-8,
            "mu_K": self.mu_K <= self.mu_K_bound + 1e-10,
            "mu_p": K + 1 - 1e-10 <= self.mu_p <= K + 2 + 1e-10,
        }

    @property
    def mu_p_in_interval(self) -> bool:
        """Whether ``mu_p`` lies in the interval implied by the prior shrinkage."""
        lo, hi = self.mu_p_interval
        return lo - 1e-10 <= self.mu_p <= hi + 1e-10

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def check_theorem3(design: FactorDesign, model: PrecisionModel, zero_tol: float = 1e-8) -> Theorem3Report:
    """Outlying eigenvalues of the scaled Gram matrix and of the scaled precision.

    Writing ``Qbar = I + S (Ubar - I) S`` with
    ``s_i^2 = tau U_ii / (T_ii + tau U_ii)`` and using ``mu_p(Ubar) = K + 1``
    gives ``1 + K min s_i^2 <= mu_p(Qbar) <= 1 + K max s_i^2``, reported
    as ``mu_p_interval``. For any ``T_ii > 0`` the upper end is below
    ``K + 1``, so the ``mu_p`` entry of :attr:`Theorem3Report.checks`,
    which demands ``mu_p >= K + 1``, fails on such models.
    """
    _require_intercepts(design)
    gram = dense_sym_eig(scaled_gram(design))
    qbar = dense_sym_eig(scaled_precision(design, model))
    K = design.K
    maxT = float(model.prior_diagonal().max())
    V = build_design_matrix(design)
    u = model.tau * np.asarray(V.squared_t @ model.weights(V.rows)).ravel()
    s2 = u / (model.prior_diagonal() + u)
    return Theorem3Report(
        K=K,
        zero_count=int(np.sum(np.abs(gram) < zero_tol)),
        top_scaled_gram=float(gram[-1]),
        mu_K=float(qbar[K - 1]),
        mu_K_bound=maxT / (model.tau + maxT),
        mu_p=float(qbar[-1]),
        mu_p_interval=(1 + K * float(s2.min()), 1 + K * float(s2.max())),
        gram_eigs=gram,
        qbar_eigs=qbar,
    )


@dataclass
class LemmaBound:
    bound: float
    actual: float
    informative: bool
    reason: str = ""
    nu_K: float = float("nan")
    nu_second: float = float("nan")

    def holds(self, rel: float = 1e-8) -> bool:
        return self.actual <= self.bound * (1 + rel)

    def __iter__(self):
        return iter((self.bound, self.actual))


def interlace_bound(design: FactorDesign, model: PrecisionModel, margin: float = 1e-10) -> LemmaBound:
    """``kappa_{K+1,p-2}(Qbar)`` and the bound ``(1 + (K-1) nu_{p-2}) / (1 + (K-1) nu_K)``.

    The bound is flagged uninformative when ``nu_K`` sits within ``margin``
    of ``-1/(K-1)``; a violated sign condition ``nu_K <= 0 <= nu_{p-2}`` is
    recorded in ``reason`` but does not change ``informative``.
    """
    K = design.K
    nu = dense_sym_eig(normalized_adjacency_r(design))
    mu = dense_sym_eig(scaled_precision(design, model))
    nu_K, nu_2 = float(nu[K - 1]), float(nu[-2])
    actual = effective_condition_number(mu, K, 2)
    reasons = []
    informative = nu_K > -1.0 / (K - 1) + margin
    if not informative:
        reasons.append(f"nu_K = {nu_K:.6g} at the lower limit -1/(K-1)")
    if not (nu_K <= 0 <= nu_2):
        reasons.append("sign condition nu_K <= 0 <= nu_{p-2} fails")
    denom = 1 + (K - 1) * nu_K
    bound = (1 + (K - 1) * nu_2) / denom if denom > 0 else math.inf
    return LemmaBound(bound, actual, informative, "; ".join(reasons), nu_K, nu_2)


def count_near(eigs, value: float, tol: float = 1e-8) -> int:
    return int(np.sum(np.abs(np.asarray(eigs) - value) <= tol))


@dataclass
class PairwiseReport:
    component_counts: tuple[int, ...]
    factor_order: tuple[int, ...]
    lambda_star: float
    predicted_multiplicity: int
    observed_multiplicity: int

    @property
    def consistent(self) -> bool:
        return self.observed_multiplicity >= self.predicted_multiplicity


def pairwise_components(design: FactorDesign, order=None, tol: float = 1e-8) -> PairwiseReport:
    """Component counts along consecutive factor pairs of ``order`` (identity by default)."""
    K = design.K
    if K < 2:
        raise ValueError("need at least two factors")
    order = tuple(range(K)) if order is None else tuple(order)
    counts = tuple(component_count(design, order[l], order[l + 1]) for l in range(K - 1))
    nu = dense_sym_eig(normalized_adjacency_r(design))
    return PairwiseReport(
        component_counts=counts,
        factor_order=order,
        lambda_star=lambda_star(design),
        predicted_multiplicity=sum(counts),
        observed_multiplicity=count_near(nu, -1.0 / (K - 1), tol),
    )


def max_pairwise_components(design: FactorDesign) -> tuple[tuple[int, ...], int]:
    """Factor permutation with the largest lower bound on the multiplicity of ``-1/(K-1)``."""
    K = design.K
    cache = {}

    def cc(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            cache[key] = component_count(design, *key)
        return cache[key]

    best = None
    for perm in itertools.permutations(range(K)):
        if perm[0] > perm[-1]:
            continue
        total = sum(cc(perm[l], perm[l + 1]) for l in range(K - 1))
        if best is None or total > best[1]:
            best = (perm, total)
    return best


def _nontrivial_singular_max(C: np.ndarray) -> float:
    r = C.sum(axis=1)
    c = C.sum(axis=0)
    B = C / np.sqrt(r)[:, None] / np.sqrt(c)[None, :]
    sv = np.linalg.svd(B, compute_uv=False)
    return float(sv[1]) if sv.size > 1 else 0.0


def lambda_star(design: FactorDesign, binary: bool = False) -> float:
    """``sqrt(K-1)`` times the largest non-Perron ``|lambda|`` over all pair-normalized adjacencies.

    The spectrum of a pair-normalized bipartite adjacency is ``+-`` the
    singular values of the normalized count table plus zeros, so the
    Perron pair ``+-1`` is removed by dropping the top singular value once.
    Extra ``+-1`` eigenvalues from disconnected pairs are kept.
    """
    K = design.K
    if K < 2:
        raise ValueError("need at least two factors")
    worst = 0.0
    for k, h in itertools.combinations(range(K), 2):
        worst = max(worst, _nontrivial_singular_max(_pair_counts(design, k, h, binary)))
    return math.sqrt(K - 1) * worst


def strong_connectivity_check(design: FactorDesign, model: PrecisionModel) -> tuple[float, float, bool]:
    """Return ``(kappa_{K+1,p-2}(Qbar), (1+lambda*)/(1-lambda*), applicable)``."""
    ls = lambda_star(design)
    mu = dense_sym_eig(scaled_precision(design, model))
    actual = effective_condition_number(mu, design.K, 2)
    if ls >= 1:
        return actual, math.inf, False
    return actual, (1 + ls) / (1 - ls), True


@dataclass
class BoundCheckResult:
    bound: float
    applicable: bool
    kappas: np.ndarray

    @property
    def pass_rate(self) -> float:
        if not self.applicable or self.kappas.size == 0:
            return float("nan")
        return float(np.mean(self.kappas <= self.bound))


def biregular_bound(d1: int, d2: int, eps: float = 0.05) -> tuple[float, bool]:
    gap = 1.0 / math.sqrt(d1) + 1.0 / math.sqrt(d2) + eps
    if gap >= 1:
        return math.inf, False
    return (1 + gap) / (1 - gap), True


def _kappa3(design: FactorDesign) -> float:
    model = PrecisionModel(np.ones(design.p))
    return effective_condition_number(dense_sym_eig(scaled_precision(design, model)), 2, 2)


def biregular_bound_check(G1: int, G2: int, d1: int, d2: int | None, trials: int, eps: float = 0.05,
                          seed: int = 0) -> BoundCheckResult:
    """``kappa_{3,p-2}(Qbar)`` over seeded random biregular designs with ``T = I``, ``tau = 1``."""
    if d2 is None:
        d2 = G1 * d1 // G2
    bound, ok = biregular_bound(d1, d2, eps)
    if not ok:
        return BoundCheckResult(bound, False, np.empty(0))
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    kappas = [_kappa3(gen_biregular_bipartite(G1, G2, d1, d2, int(s))) for s in seeds]
    return BoundCheckResult(bound, True, np.asarray(kappas))


def er_epsilon(G1: int, G2: int, pi: float) -> float:
    a, b = 1.0 / (G1 * pi), 1.0 / (G2 * pi)
    return 4.0 * (math.sqrt(a) + math.sqrt(b) + math.sqrt(a + b))


def er_bound_check(G1: int, G2: int, pi: float, trials: int, seed: int = 0) -> BoundCheckResult:
    """Like :func:`biregular_bound_check` for Erdos-Renyi bipartite designs (the ``o(1)`` term dropped)."""
    eps = er_epsilon(G1, G2, pi)
    if eps >= 1:
        return BoundCheckResult(math.inf, False, np.empty(0))
    seeds = np.random.SeedSequence(seed).generate_state(trials)
    kappas = [_kappa3(gen_er_bipartite(G1, G2, pi, int(s))) for s in seeds]
    return BoundCheckResult((1 + eps) / (1 - eps), True, np.asarray(kappas))


# ---------------------------------------------------------------------------
# Histograms


def spectrum_histogram(eigs, bins: int | np.ndarray = 50) -> tuple[np.ndarray, np.ndarray]:
    eigs = np.asarray(eigs, dtype=np.float64)
    if np.isscalar(bins) and eigs.size and eigs.min() == eigs.max():
        c = eigs[0]
        edges = np.array([c - 0.5, c + 0.5])
        return edges, np.array([eigs.size])
    counts, edges = np.histogram(eigs, bins=bins)
    return edges, counts


def write_histogram_csv(path: str | os.PathLike, edges: np.ndarray, counts: np.ndarray,
                        panel: str = "", reference_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["panel", "bin_left", "bin_right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([panel, f"{lo:.17g}", f"{hi:.17g}", int(c)])
        for name, value in reference_lines:
            w.writerow([f"{panel}:reference:{name}", f"{value:.17g}", f"{value:.17g}", 0])
