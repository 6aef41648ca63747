"""Conjugate gradient solvers and the perturbation-optimization Gaussian sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cholesky import incomplete_cholesky, tri_solve
from .sparse_core import (
    FlopCounter,
    PrecisionModel,
    PrecisionOperator,
    SingularPreconditionerError,
    SparseMat,
    _tick,
    sample_prior_precision_gaussian,
)

__all__ = [
    "NumericBreakdownError",
    "CGReport",
    "Preconditioner",
    "jacobi_preconditioner",
    "ic_preconditioner",
    "identity_preconditioner",
    "cg_solve",
    "pcg_solve",
    "cg_sample",
    "effective_cn_from_cg",
    "as_operator",
]


class NumericBreakdownError(ArithmeticError):
    pass


@dataclass
class CGReport:
    """Outcome of one (P)CG run.

    ``residual_history[k]`` is ``||b - A x_k|| / ||b||`` for ``k = 0..iterations``.
    """

    iterations: int
    residual_history: list[float]
    converged: bool
    flops: int
    tolerance: float
    preconditioner: str = "none"

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual_history": [float(r) for r in self.residual_history],
            "converged": self.converged,
            "flops": self.flops,
            "tolerance": self.tolerance,
            "preconditioner": self.preconditioner,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


@dataclass
class Preconditioner:
    """``apply(r)`` returns ``M^{-1} r`` at a cost of ``flops_per_apply``."""

    apply: Callable[[np.ndarray], np.ndarray]
    flops_per_apply: int
    name: str = "custom"

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.apply(r)


def identity_preconditioner() -> Preconditioner:
    return Preconditioner(lambda r: r, 0, "identity")


def jacobi_preconditioner(diagonal: np.ndarray) -> Preconditioner:
    diagonal = np.asarray(diagonal, dtype=np.float64)
    if np.any(diagonal <= 0):
        raise SingularPreconditionerError("Jacobi preconditioner needs a positive diagonal")
    inv = 1.0 / diagonal
    return Preconditioner(lambda r: inv * r, diagonal.size, "jacobi")


def ic_preconditioner(Q: SparseMat) -> Preconditioner:
    """Zero fill-in incomplete Cholesky preconditioner ``(L L^T)^{-1}``."""
    L = incomplete_cholesky(Q)

    def apply(r):
        return tri_solve(L, tri_solve(L, r), transposed=True)

    return Preconditioner(apply, 2 * (2 * L.nnz - L.rows), "ic0")


def as_operator(A, nnz: int | None = None) -> tuple[Callable[[np.ndarray], np.ndarray], int | None]:
    """Normalize a matrix or callable into ``(apply, nnz)``."""
    if isinstance(A, SparseMat):
        return (lambda x: A.csr @ x), A.nnz if nnz is None else nnz
    if isinstance(A, np.ndarray):
        return (lambda x: A @ x), int(np.count_nonzero(A)) if nnz is None else nnz
    if nnz is None:
        nnz = getattr(A, "nnz", None)
    return A, nnz


def _run(apply_A, apply_Minv, b, tol, maxit, nnz, extra_per_iter, flops, callback, name):
    if not tol > 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    maxit = 10 * n if maxit is None else int(maxit)
    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, CGReport(0, [0.0], True, 0, tol, name)
    r = b.copy()
    z = r if apply_Minv is None else apply_Minv(r)
    d = z.copy()
    rz = float(r @ z)
    history = [1.0]
    it = 0
    converged = False
    while it < maxit:
        Ad = apply_A(d)
        dAd = float(d @ Ad)
        if not np.isfinite(dAd) or dAd <= 0:
            raise NumericBreakdownError(f"curvature d^T A d = {dAd!r} at iteration {it}; operator not SPD?")
        alpha = rz / dAd
        x += alpha * d
        r -= alpha * Ad
        it += 1
        rel = float(np.linalg.norm(r)) / bnorm
        if not np.isfinite(rel):
            raise NumericBreakdownError(f"non-finite residual at iteration {it}")
        history.append(rel)
        if callback is not None:
            callback(it, x, rel)
        if rel < tol:
            converged = True
            break
        z = r if apply_Minv is None else apply_Minv(r)
        rz_new = float(r @ z)
        if rz_new <= 0 and apply_Minv is not None:
            raise NumericBreakdownError(f"preconditioned residual norm {rz_new!r} at iteration {it}")
        d = z + (rz_new / rz) * d
        rz = rz_new
    cost = it * (4 * n + 2 * (nnz or 0) + extra_per_iter)
    _tick(flops, cost)
    return x, CGReport(it, history, converged, cost, tol, name)


def cg_solve(apply_A, b, tol: float = 1e-8, maxit: int | None = None, nnz: int | None = None,
             flops: FlopCounter | None = None, callback=None) -> tuple[np.ndarray, CGReport]:
    """Unpreconditioned CG from ``x_0 = 0``.

    Stops when ``||b - A x_k|| < tol ||b||``. Flops are counted as
    ``iterations * (4p + 2 nnz)``; ``nnz`` is taken from ``apply_A`` when
    it is a matrix or carries an ``nnz`` attribute.
    """
    op, nnz = as_operator(apply_A, nnz)
    return _run(op, None, b, tol, maxit, nnz, 0, flops, callback, "none")


def pcg_solve(apply_A, apply_Minv, b, tol: float = 1e-8, maxit: int | None = None, nnz: int | None = None,
              flops: FlopCounter | None = None, callback=None) -> tuple[np.ndarray, CGReport]:
    """Preconditioned CG; ``apply_Minv`` applies ``M^{-1}``.

    A :class:`Preconditioner` contributes ``flops_per_apply`` per iteration;
    a bare callable is charged ``p`` (the cost of a diagonal apply).
    """
    op, nnz = as_operator(apply_A, nnz)
    b = np.asarray(b, dtype=np.float64)
    if isinstance(apply_Minv, Preconditioner):
        extra, name = apply_Minv.flops_per_apply, apply_Minv.name
    else:
        extra, name = b.size, "custom"
    return _run(op, apply_Minv, b, tol, maxit, nnz, extra, flops, callback, name)


def cg_sample(V: SparseMat, model: PrecisionModel, m: np.ndarray, tol: float = 1e-8,
              rng: np.random.Generator | None = None, preconditioner: str | Preconditioner = "jacobi",
              maxit: int | None = None, flops: FlopCounter | None = None, operator: PrecisionOperator | None = None,
              ) -> tuple[np.ndarray, CGReport]:
    """Draw ``theta ~ N(Q^{-1} m, Q^{-1})`` by solving ``Q theta = m + z`` with ``z ~ N(0, Q)``.

    ``Q = T + tau V^T Omega V`` is applied matrix-free. ``preconditioner``
    is ``"jacobi"``, ``"none"`` or a :class:`Preconditioner`.
    """
    rng = np.random.default_rng() if rng is None else rng
    op = PrecisionOperator(V, model) if operator is None else operator
    z = sample_prior_precision_gaussian(V, model, rng)
    _tick(flops, 2 * V.nnz + 2 * model.p)
    rhs = np.asarray(m, dtype=np.float64) + z
    if isinstance(preconditioner, Preconditioner):
        M = preconditioner
    elif preconditioner == "jacobi":
        M = jacobi_preconditioner(op.diagonal())
    elif preconditioner in ("none", None):
        return cg_solve(op, rhs, tol, maxit, flops=flops)
    else:
        raise ValueError(f"unknown preconditioner '{preconditioner}'")
    return pcg_solve(op, M, rhs, tol, maxit, flops=flops)


def effective_cn_from_cg(report: CGReport) -> float:
    """Condition number implied by the observed residual decay.

    Fits ``log r_k = a + k log rho`` by least squares and returns
    ``((1 + rho) / (1 - rho))^2``, the ``kappa`` whose CG rate
    ``(sqrt(kappa) - 1) / (sqrt(kappa) + 1)`` equals ``rho``. This is a
    diagnostic estimate, not the true condition number; CG's superlinear
    phase biases it downward.
    """
    hist = np.asarray(report.residual_history, dtype=np.float64)
    if hist.size >= 2 and hist[-1] == 0.0 and np.all(hist[1:-1] == 0.0):
        return 1.0
    if report.iterations < 3:
        raise ValueError(f"need at least 3 iterations to fit a rate, got {report.iterations}")
    k = np.flatnonzero(hist > 0)
    slope = np.polyfit(k.astype(float), np.log(hist[k]), 1)[0]
    rho = float(np.exp(slope))
    if rho >= 1:
        return np.inf
    return ((1 + rho) / (1 - rho)) ** 2
