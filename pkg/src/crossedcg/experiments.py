"""Desk-scale drivers for the cost, conditioning and Gibbs benchmarks.

Every driver returns plain dataclasses so that the command line layer only
has to serialize them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .cg import cg_sample, cg_solve, effective_cn_from_cg, jacobi_preconditioner, pcg_solve
from .cholesky import ci_graph, min_degree_order, symbolic_factor
from .designs import add_interaction, add_nested, gen_uniform_cells, gen_worst_case, mcar_scenario
from .gibbs import GLMMSpec, Likelihood, run_chain
from .sparse_core import (
    FactorDesign,
    FlopCounter,
    PrecisionModel,
    assemble_precision,
    build_design_matrix,
    jacobi_scale,
)
from .spectral import dense_sym_eig, effective_condition_number, spectrum_histogram

__all__ = [
    "CostRow",
    "Table1Row",
    "Table3Row",
    "SpectrumPanels",
    "TABLE3_CASES",
    "loglog_slope",
    "cost_benchmark",
    "worst_case_benchmark",
    "cg_sampler_iterations",
    "table1",
    "ladder_design",
    "table3_analog",
    "spectrum_panels",
    "rows_to_dicts",
    "cost_slopes",
]

TABLE3_CASES = ("intercepts", "nested", "slopes", "2way", "3way", "full")


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two points to fit a slope")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _check_grid(grid) -> list[int]:
    grid = [int(g) for g in grid]
    if not grid:
        raise ValueError("the G grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"the G grid must be strictly ascending, got {grid}")
    return grid


@dataclass
class CostRow:
    G: int
    p: int
    N: int
    nnz_Q: int
    n_L: int
    chol_flops: int
    cg_iterations: int
    cg_flops: int


def _cost_row(design: FactorDesign, G: int, order: str, seed: int, tol: float) -> CostRow:
    V = build_design_matrix(design)
    model = PrecisionModel(np.ones(design.p))
    Q = assemble_precision(V, model)
    graph = ci_graph(Q)
    fixed = range(design.fixed_slice().start, design.p)
    if order == "min_degree":
        perm = min_degree_order(graph, pin_last=fixed)
    elif order == "natural":
        perm = np.arange(design.p)
    else:
        raise ValueError(f"unknown ordering '{order}'")
    rep = symbolic_factor(graph, perm)
    rng = np.random.default_rng(seed)
    m = V.csr_t @ rng.standard_normal(design.N)
    fc = FlopCounter()
    _, cg_rep = cg_sample(V, model, m, tol, rng, flops=fc)
    if not cg_rep.converged:
        raise ArithmeticError(f"CG did not converge for G={G}")
    return CostRow(G, design.p, design.N, Q.nnz, rep.total_nl, rep.predicted_flops, cg_rep.iterations, fc.count)


def cost_benchmark(scenario: str, grid, seed: int = 0, tol: float = 1e-8, order: str = "min_degree") -> list[CostRow]:
    """Predicted Cholesky flops and measured CG-sampler flops on MCAR designs.

    ``T = I``, ``tau = 1`` and ``m = V^T y`` with standard normal ``y``.
    The fixed effect is eliminated last.
    """
    grid = _check_grid(grid)
    return [_cost_row(mcar_scenario(scenario, G, seed + i), G, order, seed + i, tol) for i, G in enumerate(grid)]


def worst_case_benchmark(grid, d: int = 3, order: str = "natural", seed: int = 0, tol: float = 1e-8) -> list[CostRow]:
    """Cost rows for the fill-maximizing two-factor design of degree ``d``."""
    grid = _check_grid(grid)
    return [_cost_row(gen_worst_case(G, d), G, order, seed + i, tol) for i, G in enumerate(grid)]


def cg_sampler_iterations(scenario: str, p: int, seed: int = 0, tol: float = 1e-8) -> int:
    """Jacobi-PCG iterations of one CG-sampler draw for an MCAR scenario of dimension about ``p``."""
    K = 5 if scenario == "c" else 2
    G = int(round((p - 1) / K))
    design = mcar_scenario(scenario, G, seed)
    V = build_design_matrix(design)
    model = PrecisionModel(np.ones(design.p))
    rng = np.random.default_rng(seed)
    m = V.csr_t @ rng.standard_normal(design.N)
    _, rep = cg_sample(V, model, m, tol, rng)
    return rep.iterations


@dataclass
class Table1Row:
    G1: int
    G2: int
    N: int
    p: int
    kappa_plain: float
    iterations_plain: int
    kappa_jacobi: float
    iterations_jacobi: int
    rate_kappa_plain: float
    rate_kappa_jacobi: float


def table1(G1: int, G2_list, seed: int = 0, tol: float = 1e-8) -> list[Table1Row]:
    """Conditioning of ``Q`` and ``Qbar`` on two-factor designs of growing imbalance.

    ``N = (G1 + G2)^{3/2}`` cells are drawn uniformly without replacement,
    ``T = I``, ``tau = 1`` and ``b ~ Uniform(-0.5, 0.5)^p``.
    """
    rows = []
    for i, G2 in enumerate(G2_list):
        G2 = int(G2)
        N = int(round((G1 + G2) ** 1.5))
        design = gen_uniform_cells((G1, G2), min(N, G1 * G2), seed + i)
        V = build_design_matrix(design)
        Q = assemble_precision(V, PrecisionModel(np.ones(design.p)))
        Qbar, _ = jacobi_scale(Q)
        rng = np.random.default_rng(seed + i)
        b = rng.uniform(-0.5, 0.5, design.p)
        _, plain = cg_solve(Q, b, tol)
        _, jac = pcg_solve(Q, jacobi_preconditioner(Q.diagonal()), b, tol)
        k_plain = effective_condition_number(dense_sym_eig(Q.to_dense()), 2, 2)
        k_jac = effective_condition_number(dense_sym_eig(Qbar.to_dense()), 2, 2)
        rows.append(Table1Row(G1, G2, design.N, design.p, k_plain, plain.iterations, k_jac, jac.iterations,
                              effective_cn_from_cg(plain), effective_cn_from_cg(jac)))
    return rows


def ladder_design(case: str, N: int = 7000, seed: int = 0, sizes=(5, 4, 4, 51), n_groups: int = 5) -> FactorDesign:
    """Synthetic four-factor survey design extended according to ``case``.

    Observations draw each factor level uniformly. The last factor is
    split into ``n_groups`` contiguous groups for the nested case. The
    slope cases add a standard normal covariate with a random slope on the
    first and last factor and a fixed slope.
    """
    if case not in TABLE3_CASES:
        raise ValueError(f"unknown case '{case}'; expected one of {TABLE3_CASES}")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        levels = np.column_stack([rng.integers(0, g, N) for g in sizes])
        if all(np.unique(levels[:, k]).size == g for k, g in enumerate(sizes)):
            break
    else:
        raise ValueError(f"N={N} too small to observe every level of {sizes}")
    x = rng.standard_normal(N)
    K = len(sizes)
    slopes = case in ("slopes", "full")
    if slopes:
        w = np.column_stack([np.ones(N), x])
        cov = tuple(w if k in (0, K - 1) else None for k in range(K))
        design = FactorDesign(tuple(sizes), levels, cov, np.column_stack([np.ones(N), x]))
    else:
        design = FactorDesign(tuple(sizes), levels)
    if case in ("nested", "full"):
        G_last = sizes[-1]
        design = add_nested(design, K - 1, np.arange(G_last) * n_groups // G_last)
    if case in ("2way", "3way", "full"):
        for k in range(K):
            for h in range(k + 1, K):
                design = add_interaction(design, k, h)
    if case in ("3way", "full"):
        for k in range(K):
            for h in range(k + 1, K):
                for j in range(h + 1, K):
                    design = add_interaction(design, k, h, j)
    return design


@dataclass
class Table3Row:
    case: str
    p: int
    N: int
    mean_cg_iterations: float
    seed: int


def _binomial_response(design: FactorDesign, rng: np.random.Generator, n_trials: int, scale: float) -> np.ndarray:
    V = build_design_matrix(design)
    theta = scale * rng.standard_normal(design.p)
    eta = V.csr @ theta
    return rng.binomial(n_trials, 1.0 / (1.0 + np.exp(-eta))).astype(np.float64)


def table3_analog(cases=TABLE3_CASES, N: int = 7000, seed: int = 0, sweeps: int = 250, burnin: int = 50,
                  tol: float = 1e-8, n_trials: int = 1, effect_scale: float = 0.5) -> list[Table3Row]:
    """Mean CG iterations of the Gibbs sampler along the model-complexity ladder.

    All cases share the base observations for a given seed; the binomial
    response is simulated from each case's own design.
    """
    rows = []
    for case in cases:
        design = ladder_design(case, N, seed)
        rng = np.random.default_rng([seed, TABLE3_CASES.index(case)])
        y = _binomial_response(design, rng, n_trials, effect_scale)
        spec = GLMMSpec(design, y, Likelihood.BINOMIAL_LOGIT, n_trials=np.full(design.N, n_trials))
        summary = run_chain(spec, sweeps, burnin, ("cg", tol), seed=seed)
        rows.append(Table3Row(case, design.p, design.N, summary.mean_cg_iterations, seed))
    return rows


@dataclass
class SpectrumPanels:
    edges_Q: np.ndarray
    counts_Q: np.ndarray
    edges_Qbar: np.ndarray
    counts_Qbar: np.ndarray
    reference_lines: list[float]
    eigs_Q: np.ndarray = field(repr=False)
    eigs_Qbar: np.ndarray = field(repr=False)


def spectrum_panels(design: FactorDesign, model: PrecisionModel, bins: int = 50) -> SpectrumPanels:
    """Histograms of the spectra of ``Q`` and ``Qbar``.

    The reference lines are ``T_k + tau N / G_k``, the expected diagonal
    entry of each factor block of ``Q``.
    """
    V = build_design_matrix(design)
    Q = assemble_precision(V, model)
    Qbar, _ = jacobi_scale(Q)
    eq = dense_sym_eig(Q.to_dense())
    eb = dense_sym_eig(Qbar.to_dense())
    Tdiag = model.prior_diagonal()
    refs = [float(Tdiag[design.factor_slice(k)].mean() + model.tau * design.N / design.G[k]) for k in range(design.K)]
    eQ, cQ = spectrum_histogram(eq, bins)
    eB, cB = spectrum_histogram(eb, bins)
    return SpectrumPanels(eQ, cQ, eB, cB, refs, eq, eb)


def rows_to_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]


def cost_slopes(rows: list[CostRow]) -> dict[str, float]:
    p = [r.p for r in rows]
    return {"chol_slope": loglog_slope(p, [r.chol_flops for r in rows]),
            "cg_slope": loglog_slope(p, [r.cg_flops for r in rows])}
