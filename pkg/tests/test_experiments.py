import numpy as np
import pytest

from crossedcg.designs import component_count, gen_uniform_cells
from crossedcg.experiments import (
    TABLE3_CASES,
    cg_sampler_iterations,
    cost_benchmark,
    cost_slopes,
    ladder_design,
    loglog_slope,
    rows_to_dicts,
    spectrum_panels,
    table1,
    table3_analog,
    worst_case_benchmark,
)
from crossedcg.sparse_core import PrecisionModel


class TestHelpers:
    def test_loglog_slope_exact_power(self):
        x = np.array([10.0, 20.0, 40.0])
        assert loglog_slope(x, 3 * x**2.5) == pytest.approx(2.5)

    def test_loglog_slope_needs_two_points(self):
        with pytest.raises(ValueError):
            loglog_slope([1.0], [2.0])

    @pytest.mark.parametrize("grid", [(), (100, 50), (50, 50)])
    def test_bad_grid(self, grid):
        with pytest.raises(ValueError):
            cost_benchmark("a", grid)


class TestCostBenchmark:
    def test_scenario_a_slopes(self):
        rows = cost_benchmark("a", (50, 100, 200, 400))
        s = cost_slopes(rows)
        assert 2.5 <= s["chol_slope"] <= 3.3
        assert 0.8 <= s["cg_slope"] <= 1.2
        assert [r.p for r in rows] == [101, 201, 401, 801]

    def test_scenario_b_cg_slope(self):
        assert cost_slopes(cost_benchmark("b", (50, 100, 200, 400)))["cg_slope"] < 1.5

    def test_cg_flops_formula(self):
        r = cost_benchmark("a", (50,))[0]
        # Jacobi PCG iterations plus the perturbation draw z = T^{1/2} zeta + V^T eta
        nnz_V = 3 * r.N
        assert r.cg_flops == r.cg_iterations * (4 * r.p + 2 * r.nnz_Q + r.p) + 2 * nnz_V + 2 * r.p

    def test_worst_case_fill(self):
        d = 3
        rows = worst_case_benchmark((50, 100, 200), d)
        for r in rows:
            assert r.n_L >= (d - 1) / d * (r.G * (r.G + 1) / 2 - 1)
        assert 2.7 <= cost_slopes(rows)["chol_slope"] <= 3.3

    def test_cholesky_to_cg_ratio_grows(self):
        rows = cost_benchmark("a", (50, 100, 200, 400))
        ratios = [r.chol_flops / r.cg_flops for r in rows]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_rows_to_dicts(self):
        rows = rows_to_dicts(cost_benchmark("a", (50,)))
        assert set(rows[0]) >= {"G", "p", "chol_flops", "cg_flops"}

    def test_reproducible(self):
        assert cost_benchmark("a", (50, 100), seed=3) == cost_benchmark("a", (50, 100), seed=3)


class TestSamplerIterations:
    @pytest.mark.parametrize("scenario,published", [("a", 17), ("b", 22), ("c", 45)])
    def test_small_p_near_published(self, scenario, published):
        it = cg_sampler_iterations(scenario, 100)
        assert 0.5 * published <= it <= 2 * published

    def test_dimension_free(self):
        for sc in "abc":
            assert cg_sampler_iterations(sc, 1910) <= 1.5 * cg_sampler_iterations(sc, 100)


class TestPreconditioningComparison:
    def test_trends(self):
        rows = table1(100, (100, 1000))
        small, large = rows
        assert small.iterations_jacobi <= small.iterations_plain
        assert large.iterations_jacobi <= large.iterations_plain
        assert large.kappa_plain > 3 * large.kappa_jacobi
        assert large.kappa_plain > small.kappa_plain
        assert large.N == round(1100**1.5)

    def test_seed_stability(self):
        iters = np.array([table1(100, (1000,), seed=s)[0].iterations_jacobi for s in range(5)])
        assert iters.max() <= 1.5 * iters.min()


class TestLadder:
    def test_case_sizes_grow(self):
        ps = [ladder_design(c, N=2000, seed=0).p for c in TABLE3_CASES]
        assert ps[0] < ps[1] < ps[3] < ps[4] < ps[5]
        assert ps[2] > ps[0]

    def test_nested_factor(self):
        d = ladder_design("nested", N=2000, seed=0)
        parent = d.K - 2
        assert component_count(d, parent, d.K - 1) == d.G[-1]

    def test_slopes_layout(self):
        d = ladder_design("slopes", N=2000, seed=0)
        assert d.slope_dims[0] == 2 and d.slope_dims[-1] == 2
        assert d.fixed_dim == 2

    def test_unknown_case(self):
        with pytest.raises(ValueError):
            ladder_design("4way")

    def test_ordering_and_reproducibility(self):
        cases = ("intercepts", "nested", "2way")
        a = table3_analog(cases, N=2000, seed=0, sweeps=30, burnin=10)
        b = table3_analog(cases, N=2000, seed=0, sweeps=30, burnin=10)
        assert a == b
        it = [r.mean_cg_iterations for r in a]
        assert it[0] <= it[1] <= it[2]


class TestSpectrumPanels:
    def test_three_bulks_and_one(self):
        G = (30, 100, 200)
        d = gen_uniform_cells(G, 2000, seed=0)
        panels = spectrum_panels(d, PrecisionModel(np.ones(d.p)))
        e = panels.eigs_Q
        for ref, g in zip(panels.reference_lines, G):
            assert np.sum(np.abs(e - ref) < 0.35 * ref) >= 0.8 * g
        assert np.mean(np.abs(panels.eigs_Qbar - 1) < 0.5) >= 0.9
        assert panels.counts_Q.sum() == d.p and panels.counts_Qbar.sum() == d.p
