"""Blocked Gibbs sampler for crossed GLMMs with Gaussian or binomial-logit likelihood.

One sweep updates the stacked effects ``theta`` from their Gaussian full
conditional, then the Polya-Gamma auxiliaries (binomial only), then the
factor precisions ``T_k`` from their Wishart full conditionals.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .cg import CGReport, cg_sample
from .cholesky import CholeskySampler, chol_sample
from .sparse_core import (
    BlockPrior,
    FactorDesign,
    FlopCounter,
    PrecisionModel,
    PrecisionOperator,
    assemble_precision,
    build_design_matrix,
)

__all__ = [
    "Likelihood",
    "WishartPrior",
    "GLMMSpec",
    "GibbsState",
    "ThetaSampler",
    "ChainSummary",
    "sample_polya_gamma",
    "polya_gamma_mean",
    "sample_wishart",
    "initial_state",
    "theta_conditional",
    "gibbs_sweep",
    "run_chain",
    "geweke_z",
    "write_trace_csv",
]

_TRUNC = 0.64
_MAX_PROPOSALS = 10_000


# ---------------------------------------------------------------------------
# Polya-Gamma


def _series_coef(n: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Alternating-series coefficients of the J*(1, 0) density, piecewise at the truncation point."""
    h = n + 0.5
    out = np.empty_like(x)
    hi = x > _TRUNC
    out[hi] = math.pi * h[hi] * np.exp(-0.5 * h[hi] ** 2 * math.pi**2 * x[hi])
    lo = ~hi
    out[lo] = math.pi * h[lo] * (2.0 / (math.pi * x[lo])) ** 1.5 * np.exp(-2.0 * h[lo] ** 2 / x[lo])
    return out


def _ig_cdf_at_trunc(z: np.ndarray) -> np.ndarray:
    """CDF at t of the inverse Gaussian with mean 1/z and shape 1."""
    t = _TRUNC
    r = math.sqrt(1.0 / t)
    a = ndtr(r * (t * z - 1.0))
    # exp(2z) Phi(-r(tz+1)) overflows for large z; combine in log space
    b = np.exp(2.0 * z + stats.norm.logcdf(-r * (t * z + 1.0)))
    return a + b


def _truncated_ig(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse Gaussian (mean 1/z, shape 1) restricted to (0, t)."""
    t = _TRUNC
    out = np.empty_like(z)
    small_z = (1.0 / np.maximum(z, 1e-300)) > t
    idx = np.flatnonzero(small_z)
    tries = 0
    while idx.size:
        tries += 1
        if tries > _MAX_PROPOSALS:
            raise FloatingPointError("truncated inverse Gaussian sampler exceeded its proposal budget")
        E1 = rng.standard_exponential(idx.size)
        E2 = rng.standard_exponential(idx.size)
        ok = E1**2 <= 2.0 * E2 / t
        X = t / (1.0 + t * E1) ** 2
        ok &= rng.random(idx.size) <= np.exp(-0.5 * z[idx] ** 2 * X)
        out[idx[ok]] = X[ok]
        idx = idx[~ok]
    idx = np.flatnonzero(~small_z)
    tries = 0
    while idx.size:
        tries += 1
        if tries > _MAX_PROPOSALS:
            raise FloatingPointError("inverse Gaussian sampler exceeded its proposal budget")
        mu = 1.0 / z[idx]
        Y = rng.standard_normal(idx.size) ** 2
        X = mu + 0.5 * mu**2 * Y - 0.5 * mu * np.sqrt(4.0 * mu * Y + (mu * Y) ** 2)
        flip = rng.random(idx.size) > mu / (mu + X)
        X[flip] = mu[flip] ** 2 / X[flip]
        ok = X < t
        out[idx[ok]] = X[ok]
        idx = idx[~ok]
    return out


def _jstar1(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact J*(1, z) draws by the alternating-series method."""
    z = np.abs(np.asarray(z, dtype=np.float64))
    t = _TRUNC
    K = math.pi**2 / 8.0 + 0.5 * z**2
    p = math.pi / (2.0 * K) * np.exp(-K * t)
    q = 2.0 * np.exp(-z) * _ig_cdf_at_trunc(z)
    out = np.empty_like(z)
    idx = np.arange(z.size)
    tries = 0
    while idx.size:
        tries += 1
        if tries > _MAX_PROPOSALS:
            raise FloatingPointError("Polya-Gamma sampler exceeded its proposal budget")
        zi, Ki = z[idx], K[idx]
        right = rng.random(idx.size) < p[idx] / (p[idx] + q[idx])
        X = np.empty(idx.size)
        X[right] = t + rng.standard_exponential(int(right.sum())) / Ki[right]
        if (~right).any():
            X[~right] = _truncated_ig(zi[~right], rng)
        n = np.zeros(idx.size)
        S = _series_coef(n, X)
        Y = rng.random(idx.size) * S
        decided = np.zeros(idx.size, dtype=bool)
        accept = np.zeros(idx.size, dtype=bool)
        while not decided.all():
            live = ~decided
            n[live] += 1
            a = _series_coef(n[live], X[live])
            odd = (n[live] % 2) == 1
            S_live = S[live]
            S_live = np.where(odd, S_live - a, S_live + a)
            S[live] = S_live
            Y_live = Y[live]
            acc = odd & (Y_live <= S_live)
            rej = ~odd & (Y_live > S_live)
            pos = np.flatnonzero(live)
            accept[pos[acc]] = True
            decided[pos[acc | rej]] = True
        out[idx[accept]] = X[accept]
        idx = idx[~accept]
    return out


def sample_polya_gamma(b, c, rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Draw PG(b, c) for positive integer ``b`` as a sum of ``b`` exact PG(1, c) draws.

    ``b`` and ``c`` broadcast against each other (and ``size``). Uses
    ``PG(1, c) = J*(1, |c|/2) / 4``.
    """
    scalar = np.isscalar(b) and np.isscalar(c) and size is None
    b_arr, c_arr = np.broadcast_arrays(np.asarray(b), np.asarray(c, dtype=np.float64))
    if size is not None:
        b_arr = np.broadcast_to(b_arr, size)
        c_arr = np.broadcast_to(c_arr, size)
    b_flat = b_arr.ravel()
    if np.any(b_flat < 1) or np.any(b_flat != np.round(b_flat)):
        raise ValueError("b must be a positive integer")
    b_flat = b_flat.astype(np.int64)
    c_flat = c_arr.ravel()
    if b_flat.size and b_flat.max() == b_flat.min():
        draws = _jstar1(np.repeat(0.5 * c_flat, b_flat[0]), rng).reshape(-1, b_flat[0]).sum(axis=1)
    else:
        owner = np.repeat(np.arange(b_flat.size), b_flat)
        draws = np.bincount(owner, weights=_jstar1(0.5 * c_flat[owner], rng), minlength=b_flat.size)
    out = (0.25 * draws).reshape(b_arr.shape)
    return float(out) if scalar else out


def polya_gamma_mean(b, c) -> np.ndarray:
    """``E[PG(b, c)] = b tanh(c/2) / (2c)``, ``b/4`` at ``c = 0``."""
    b = np.asarray(b, dtype=np.float64)
    c = np.abs(np.asarray(c, dtype=np.float64))
    safe = np.where(c < 1e-8, 1.0, c)
    return np.where(c < 1e-8, b / 4.0, b * np.tanh(0.5 * safe) / (2.0 * safe))


# ---------------------------------------------------------------------------
# Wishart


def sample_wishart(dof: float, scale, rng: np.random.Generator) -> np.ndarray:
    """Wishart draw with mean ``dof * scale`` (Bartlett decomposition)."""
    scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    d = scale.shape[0]
    if not dof > d - 1:
        raise ValueError(f"degrees of freedom {dof} must exceed dim - 1 = {d - 1}")
    try:
        np.linalg.cholesky(scale)
    except np.linalg.LinAlgError:
        raise ValueError("Wishart scale matrix must be symmetric positive definite") from None
    W = stats.wishart(df=dof, scale=scale).rvs(random_state=rng)
    return np.atleast_2d(W)


# ---------------------------------------------------------------------------
# Model


class Likelihood(enum.Enum):
    GAUSSIAN = "gaussian"
    BINOMIAL_LOGIT = "binomial"


class ThetaSampler(enum.Enum):
    CHOLESKY = "cholesky"
    CG = "cg"


@dataclass(frozen=True)
class WishartPrior:
    """``T_k ~ W(alpha, Phi^{-1})`` so that the prior mean is ``alpha Phi^{-1}``."""

    alpha: float
    Phi: np.ndarray

    @classmethod
    def default(cls, D: int) -> "WishartPrior":
        # W(1/10, I/10); dof raised to keep the prior proper when D >= 2
        alpha = 0.1 if D == 1 else D - 1 + 0.1
        return cls(alpha, 10.0 * np.eye(D))


@dataclass(frozen=True, eq=False)
class GLMMSpec:
    """Crossed GLMM specification.

    ``fixed_precision`` is the prior precision of each fixed effect
    (``0`` gives the improper flat prior). ``learn_T=False`` keeps the
    factor precisions at their initial values.
    """

    design: FactorDesign
    y: np.ndarray
    likelihood: Likelihood = Likelihood.GAUSSIAN
    tau: float = 1.0
    n_trials: np.ndarray | None = None
    priors: tuple[WishartPrior, ...] | None = None
    fixed_mean: np.ndarray | None = None
    fixed_precision: float | np.ndarray = 1e-2
    learn_T: bool = True
    T_init: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "likelihood", Likelihood(self.likelihood))
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (self.design.N,):
            raise ValueError(f"y has shape {y.shape}, expected ({self.design.N},)")
        object.__setattr__(self, "y", y)
        if self.likelihood is Likelihood.BINOMIAL_LOGIT:
            n = np.ones(self.design.N) if self.n_trials is None else np.asarray(self.n_trials, dtype=np.float64)
            n = np.broadcast_to(n, y.shape).astype(np.float64)
            if np.any(n < 1) or np.any(n != np.round(n)):
                raise ValueError("binomial trial counts must be integers >= 1")
            if np.any(y < 0) or np.any(y > n) or np.any(y != np.round(y)):
                raise ValueError("binomial responses must be integers in [0, n_i]")
            object.__setattr__(self, "n_trials", n)
        elif not self.tau > 0:
            raise ValueError("tau must be positive")
        dims = self.design.slope_dims
        priors = self.priors or tuple(WishartPrior.default(D) for D in dims)
        if len(priors) != self.design.K:
            raise ValueError("one Wishart prior per factor is required")
        for D, pr in zip(dims, priors):
            if not pr.alpha > D - 1:
                raise ValueError(f"Wishart dof {pr.alpha} must exceed D_k - 1 = {D - 1}")
        object.__setattr__(self, "priors", tuple(priors))
        fp = np.broadcast_to(np.asarray(self.fixed_precision, dtype=np.float64), (self.design.fixed_dim,)).copy()
        if np.any(fp < 0):
            raise ValueError("fixed-effect prior precision must be non-negative")
        object.__setattr__(self, "fixed_precision", fp)

    @property
    def p(self) -> int:
        return self.design.p

    @property
    def kappa(self) -> np.ndarray:
        if self.likelihood is Likelihood.BINOMIAL_LOGIT:
            return self.y - 0.5 * self.n_trials
        return self.y

    def prior_mean(self) -> np.ndarray:
        m0 = np.zeros(self.p)
        if self.fixed_mean is not None:
            m0[self.design.fixed_slice()] = self.fixed_mean
        return m0


@dataclass
class GibbsState:
    theta: np.ndarray
    omega: np.ndarray
    Tk: tuple[np.ndarray, ...]
    kappa: np.ndarray
    sweep: int = 0
    rng_state: dict | None = None

    def copy(self) -> "GibbsState":
        return replace(self, theta=self.theta.copy(), omega=self.omega.copy(),
                       Tk=tuple(t.copy() for t in self.Tk))


def initial_state(spec: GLMMSpec) -> GibbsState:
    """``theta = 0``, ``omega = n_i / 4`` and ``T_k = I`` unless ``spec.T_init`` is set."""
    dims = spec.design.slope_dims
    Tk = spec.T_init or tuple(np.eye(D) for D in dims)
    if spec.likelihood is Likelihood.BINOMIAL_LOGIT:
        omega = spec.n_trials / 4.0
    else:
        omega = np.ones(spec.design.N)
    return GibbsState(np.zeros(spec.p), omega, tuple(np.atleast_2d(np.asarray(t, float)) for t in Tk),
                      spec.kappa.copy())


def _precision_model(spec: GLMMSpec, state: GibbsState) -> PrecisionModel:
    T = BlockPrior(spec.design.G, state.Tk, spec.fixed_precision)
    if spec.likelihood is Likelihood.BINOMIAL_LOGIT:
        return PrecisionModel(T, 1.0, state.omega, spec.prior_mean())
    return PrecisionModel(T, spec.tau, None, spec.prior_mean())


def theta_conditional(spec: GLMMSpec, state: GibbsState, V=None, Vt_kappa=None) -> tuple[PrecisionModel, np.ndarray]:
    """Precision model and linear term ``m`` of ``theta | rest ~ N(Q^{-1} m, Q^{-1})``.

    ``m = T m0 + V^T kappa`` (binomial) or ``T m0 + tau V^T y`` (Gaussian).
    """
    model = _precision_model(spec, state)
    if Vt_kappa is None:
        V = build_design_matrix(spec.design) if V is None else V
        Vt_kappa = V.csr.T @ state.kappa
    return model, model.prior_matvec(model.prior_mean()) + model.tau * Vt_kappa


@dataclass
class _ChainContext:
    V: object
    chol: CholeskySampler
    Vt_kappa: np.ndarray
    nnz_Q: int | None = None
    cached_Q: tuple | None = None


def _context(spec: GLMMSpec) -> _ChainContext:
    fixed = spec.design.fixed_slice()
    V = build_design_matrix(spec.design)
    return _ChainContext(V, CholeskySampler(range(fixed.start, fixed.stop)), V.csr.T @ spec.kappa)


def _sample_theta(spec, state, sampler, tol, rng, ctx, flops):
    model, m = theta_conditional(spec, state, ctx.V, ctx.Vt_kappa)
    if sampler is ThetaSampler.CG:
        op = PrecisionOperator(ctx.V, model, ctx.nnz_Q)
        ctx.nnz_Q = op.nnz
        theta, rep = cg_sample(ctx.V, model, m, tol, rng, flops=flops, operator=op)
        if not rep.converged:
            raise FloatingPointError(f"CG did not converge in {rep.iterations} iterations")
        return theta, rep
    key = (b"".join(t.tobytes() for t in state.Tk), None if model.omega is None else model.omega.tobytes())
    if ctx.cached_Q is None or ctx.cached_Q[0] != key:
        Q = assemble_precision(ctx.V, model)
        diag = Q.diagonal()
        if np.any(diag <= 0):
            bad = int(np.flatnonzero(diag <= 0)[0])
            raise np.linalg.LinAlgError(
                f"singular precision: coordinate {bad} has no prior or likelihood information")
        try:
            ctx.chol.factor(Q)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"singular precision ({exc}); a flat fixed-effect prior needs a design whose columns are "
                "linearly independent"
            ) from exc
        ctx.cached_Q = (key, Q)
    return ctx.chol.sample(ctx.cached_Q[1], m, rng, flops=flops), None


def _update_T(spec: GLMMSpec, theta: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    out = []
    for k, (G, D, prior) in enumerate(zip(spec.design.G, spec.design.slope_dims, spec.priors)):
        block = theta[spec.design.factor_slice(k)].reshape(G, D)
        scale = np.linalg.inv(prior.Phi + block.T @ block)
        out.append(sample_wishart(prior.alpha + G, 0.5 * (scale + scale.T), rng))
    return tuple(out)


@dataclass
class _Streams:
    theta: np.random.Generator
    omega: np.random.Generator
    T: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "_Streams":
        ss = np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(3)))

    @classmethod
    def single(cls, rng: np.random.Generator) -> "_Streams":
        return cls(rng, rng, rng)

    def state(self) -> dict:
        return {"theta": self.theta.bit_generator.state, "omega": self.omega.bit_generator.state,
                "T": self.T.bit_generator.state}


def _coerce_sampler(theta_sampler) -> tuple[ThetaSampler, float]:
    if isinstance(theta_sampler, tuple):
        return ThetaSampler(theta_sampler[0]), float(theta_sampler[1])
    if isinstance(theta_sampler, str) and theta_sampler.startswith("cg"):
        tol = float(theta_sampler[3:-1]) if "(" in theta_sampler else 1e-8
        return ThetaSampler.CG, tol
    return ThetaSampler(theta_sampler), 1e-8


def gibbs_sweep(spec: GLMMSpec, state: GibbsState, theta_sampler="cg", rng=None,
                _ctx: _ChainContext | None = None, flops: FlopCounter | None = None,
                ) -> tuple[GibbsState, CGReport | None]:
    """One sweep: theta, then omega (binomial only), then each ``T_k``.

    ``theta_sampler`` is ``"cholesky"``, ``"cg"``, ``("cg", tol)`` or
    ``"cg(1e-10)"``. ``rng`` is a Generator or a :class:`_Streams` triple.
    """
    kind, tol = _coerce_sampler(theta_sampler)
    streams = rng if isinstance(rng, _Streams) else _Streams.single(rng or np.random.default_rng())
    ctx = _ctx or _context(spec)
    theta, report = _sample_theta(spec, state, kind, tol, streams.theta, ctx, flops)
    omega = state.omega
    if spec.likelihood is Likelihood.BINOMIAL_LOGIT:
        eta = ctx.V.csr @ theta
        omega = sample_polya_gamma(spec.n_trials, eta, streams.omega)
    Tk = _update_T(spec, theta, streams.T) if spec.learn_T else state.Tk
    new = GibbsState(theta, omega, Tk, state.kappa, state.sweep + 1, streams.state())
    return new, report


@dataclass
class ChainSummary:
    cg_iterations: np.ndarray
    cg_flops: np.ndarray
    theta_mean: np.ndarray
    theta_var: np.ndarray
    Tk_mean: tuple[np.ndarray, ...]
    trace: np.ndarray | None = None
    trace_columns: tuple[str, ...] = ()
    final_state: GibbsState | None = None
    p: int = 0
    thetas: np.ndarray | None = None

    @property
    def mean_cg_iterations(self) -> float:
        return float(np.mean(self.cg_iterations)) if self.cg_iterations.size else float("nan")


def run_chain(spec: GLMMSpec, sweeps: int, burnin: int = 0, theta_sampler="cg", seed=0,
              keep_theta: bool = False, state: GibbsState | None = None) -> ChainSummary:
    """Run ``sweeps`` sweeps in total and summarize the last ``sweeps - burnin``.

    Randomness comes from three independent streams spawned from ``seed``
    (theta, omega, T), so changing the theta sampler leaves the other
    streams untouched.
    """
    if sweeps <= 0:
        raise ValueError("sweeps must be positive")
    if not 0 <= burnin < sweeps:
        raise ValueError("need 0 <= burnin < sweeps")
    kind, _ = _coerce_sampler(theta_sampler)
    streams = _Streams.from_seed(seed)
    ctx = _context(spec)
    state = initial_state(spec) if state is None else state
    kept = sweeps - burnin
    p = spec.p
    iters = np.zeros(kept, dtype=np.int64)
    flops = np.zeros(kept, dtype=np.int64)
    s1 = np.zeros(p)
    s2 = np.zeros(p)
    T_sum = [np.zeros_like(t) for t in state.Tk]
    K = spec.design.K
    fixed = spec.design.fixed_slice()
    columns = ("sweep", "cg_iterations", "cg_flops") + tuple(f"fixed_{j}" for j in range(fixed.stop - fixed.start)) \
        + tuple(f"T_{k}_00" for k in range(K))
    trace = np.zeros((kept, len(columns)))
    thetas = np.zeros((kept, p)) if keep_theta else None
    for s in range(sweeps):
        fc = FlopCounter()
        state, rep = gibbs_sweep(spec, state, kind if kind is ThetaSampler.CHOLESKY else theta_sampler,
                                 streams, ctx, fc)
        if s < burnin:
            continue
        j = s - burnin
        iters[j] = rep.iterations if rep is not None else 0
        flops[j] = fc.count
        s1 += state.theta
        s2 += state.theta**2
        for acc, t in zip(T_sum, state.Tk):
            acc += t
        trace[j] = [s + 1, iters[j], flops[j], *state.theta[fixed], *(t[0, 0] for t in state.Tk)]
        if keep_theta:
            thetas[j] = state.theta
    mean = s1 / kept
    var = s2 / kept - mean**2
    return ChainSummary(iters, flops, mean, np.maximum(var, 0.0), tuple(a / kept for a in T_sum),
                        trace, columns, state, p, thetas)


def geweke_z(x, first: float = 0.1, last: float = 0.5, batches: int = 20) -> float:
    """Geweke z-score comparing early and late segment means with batch-means variances."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    a = x[: int(first * n)]
    b = x[n - int(last * n):]

    def var_of_mean(seg):
        nb = min(batches, seg.size // 2)
        if nb < 2:
            return np.var(seg, ddof=1) / seg.size
        m = seg[: (seg.size // nb) * nb].reshape(nb, -1).mean(axis=1)
        return np.var(m, ddof=1) / nb

    denom = math.sqrt(var_of_mean(a) + var_of_mean(b))
    return float((a.mean() - b.mean()) / denom) if denom > 0 else 0.0


def write_trace_csv(path: str | os.PathLike, summary: ChainSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(summary.trace_columns)
        for row in summary.trace:
            w.writerow([int(row[0]), int(row[1]), int(row[2]), *(f"{v:.17g}" for v in row[3:])])
