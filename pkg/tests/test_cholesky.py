import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossedcg.cholesky import (
    CholeskySampler,
    CIGraph,
    NotPositiveDefiniteError,
    TriangularFactor,
    chol_sample,
    ci_graph,
    cholesky_cost,
    future_set_fill,
    incomplete_cholesky,
    min_degree_order,
    numeric_cholesky,
    symbolic_factor,
    tri_solve,
)
from crossedcg.designs import gen_mcar, gen_pairwise_disconnected, gen_worst_case
from crossedcg.experiments import loglog_slope
from crossedcg.sparse_core import (
    FactorDesign,
    FlopCounter,
    PrecisionModel,
    SingularPreconditionerError,
    SparseMat,
    assemble_precision,
    build_design_matrix,
)


def tridiag(p, a=4.0, b=-1.0):
    return SparseMat.from_dense(np.diag(np.full(p, a)) + np.diag(np.full(p - 1, b), 1) + np.diag(np.full(p - 1, b), -1))


def design_precision(design, T=1.0):
    return assemble_precision(build_design_matrix(design), PrecisionModel(np.full(design.p, T)))


def random_graph(rng, p, density):
    edges = [(i, j) for i in range(p) for j in range(i) if rng.random() < density]
    return CIGraph.from_edges(p, edges)


def spd_from_graph(graph, rng):
    p = graph.p
    M = np.zeros((p, p))
    for i, nb in enumerate(graph.adjacency):
        for j in nb:
            M[i, j] = rng.uniform(-1, 1)
    M = (M + M.T) / 2
    M += np.diag(np.abs(M).sum(axis=1) + rng.uniform(0.5, 1.5, p))
    return SparseMat.from_dense(M, symmetric=True)


class TestGraphAndOrder:
    def test_diagonal_graph_is_empty(self):
        assert ci_graph(SparseMat.diagonal_matrix([1.0, 2.0, 3.0])).n_edges == 0

    def test_single_observation_triangle(self):
        Q = design_precision(FactorDesign((1, 1), np.array([[0, 0]])))
        g = ci_graph(Q)
        assert g.n_edges == 3
        np.testing.assert_array_equal(g.degree(), 2)

    def test_multipartite_with_global_vertex(self):
        d = gen_pairwise_disconnected(4)
        g = ci_graph(design_precision(d))
        fixed = d.p - 1
        assert g.adjacency[fixed].size == d.p - 1
        for k in range(3):
            sl = d.factor_slice(k)
            for v in range(sl.start, sl.stop):
                assert not np.any((g.adjacency[v] >= sl.start) & (g.adjacency[v] < sl.stop))

    def test_asymmetric_pattern_rejected(self):
        with pytest.raises(ValueError, match="asymmetric"):
            ci_graph(SparseMat.from_dense([[1.0, 1.0], [0.0, 1.0]]))

    def test_star_hub_last(self):
        g = CIGraph.from_edges(5, [(0, j) for j in range(1, 5)])
        np.testing.assert_array_equal(min_degree_order(g, pin_last=[0]), [1, 2, 3, 4, 0])

    def test_chain_has_no_fill(self):
        g = ci_graph(tridiag(8))
        rep = symbolic_factor(g, min_degree_order(g))
        assert rep.total_nl == 2 * 8 - 1

    def test_fixed_effect_position(self):
        # eliminating theta_0 earlier never reduces the fill
        for seed in range(20):
            d = gen_mcar(2, (8, 9), 0.3, seed)
            g = ci_graph(design_precision(d))
            base = list(range(d.p - 1))
            fills = [symbolic_factor(g, base[:pos] + [d.p - 1] + base[pos:]).total_nl for pos in (0, 5, 10, d.p - 1)]
            assert all(a >= b for a, b in zip(fills, fills[1:]))


class TestSymbolic:
    def test_tridiagonal(self):
        assert symbolic_factor(ci_graph(tridiag(5)), np.arange(5)).total_nl == 9

    def test_dense(self):
        rep = symbolic_factor(ci_graph(SparseMat.from_dense(np.ones((4, 4)) + 3 * np.eye(4))), np.arange(4))
        assert rep.total_nl == 10
        np.testing.assert_array_equal(rep.per_column_counts, [4, 3, 2, 1])

    def test_arrow(self):
        g = CIGraph.from_edges(5, [(0, j) for j in range(1, 5)])
        assert symbolic_factor(g, [0, 1, 2, 3, 4]).total_nl == 15
        assert symbolic_factor(g, [1, 2, 3, 4, 0]).total_nl == 9

    def test_cost_formula(self):
        # column counts (3, 1): n' = 2 and 0
        assert cholesky_cost(np.array([3, 1])) == (1 + 2 + 2 * 3) + 1

    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            symbolic_factor(ci_graph(tridiag(3)), [0, 0, 1])

    @given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.floats(0.05, 0.7))
    @settings(max_examples=200, deadline=None)
    def test_matches_future_set_oracle(self, seed, p, density):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, p, density)
        order = rng.permutation(p)
        rep = symbolic_factor(g, order, keep_pattern=True)
        predicted = {(int(i), m) for m, rows in enumerate(rep.pattern) for i in rows}
        assert predicted == future_set_fill(g, order)
        assert rep.total_nl == p + len(predicted)
        assert np.all(rep.per_column_counts <= p - np.arange(p))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_dense_shortcut_agrees(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 10, 0.6)
        order = rng.permutation(10)
        a = symbolic_factor(g, order)
        b = symbolic_factor(g, order, keep_pattern=True)
        np.testing.assert_array_equal(a.per_column_counts, b.per_column_counts)

    @pytest.mark.parametrize("seed", range(5))
    def test_cost_sandwich(self, seed):
        d = gen_mcar(2, (20, 25), 0.2, seed)
        g = ci_graph(design_precision(d))
        rep = symbolic_factor(g, min_degree_order(g, pin_last=[d.p - 1]))
        assert rep.lower_bound <= 3 * rep.predicted_flops
        assert rep.predicted_flops <= 3 * rep.upper_bound

    def test_worst_case_growth(self):
        rows = []
        for G in (50, 100, 200, 400):
            d = gen_worst_case(G, 3)
            rep = symbolic_factor(ci_graph(design_precision(d)), np.arange(d.p))
            rows.append((d.p, rep.total_nl, rep.predicted_flops))
        p, nl, fl = map(np.array, zip(*rows))
        assert 1.8 <= loglog_slope(p, nl) <= 2.2
        assert 2.7 <= loglog_slope(p, fl) <= 3.3

    def test_report_json(self):
        rep = symbolic_factor(ci_graph(tridiag(3)), np.arange(3))
        d = rep.to_dict()
        assert d["n_l_total"] == 5 and d["bounds"]["lower"] == pytest.approx(25 / 3)


class TestNumeric:
    def test_two_by_two(self):
        L = numeric_cholesky(SparseMat.from_dense([[4.0, 2.0], [2.0, 5.0]]))
        np.testing.assert_allclose(L.to_dense(), [[2, 0], [1, 2]])

    def test_identity(self):
        np.testing.assert_array_equal(numeric_cholesky(SparseMat.identity(4)).to_dense(), np.eye(4))

    def test_indefinite_names_column(self):
        with pytest.raises(NotPositiveDefiniteError) as exc:
            numeric_cholesky(SparseMat.from_dense([[1.0, 2.0], [2.0, 1.0]]))
        assert exc.value.column == 1

    @given(st.integers(0, 2**31 - 1), st.integers(1, 15), st.floats(0.05, 0.6))
    @settings(max_examples=100, deadline=None)
    def test_reconstruction_and_support(self, seed, p, density):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, p, density)
        Q = spd_from_graph(g, rng)
        order = min_degree_order(g) if rng.random() < 0.5 else rng.permutation(p)
        fc = FlopCounter()
        L = numeric_cholesky(Q, order, flops=fc)
        PQ = Q.permuted(order).to_dense()
        Ld = L.to_dense()
        assert np.linalg.norm(PQ - Ld @ Ld.T) <= 1e-10 * np.linalg.norm(PQ)
        np.testing.assert_allclose(Ld, np.linalg.cholesky(PQ), atol=1e-10)
        rep = symbolic_factor(g, order, keep_pattern=True)
        allowed = {(int(i), m) for m, rows in enumerate(rep.pattern) for i in rows} | {(m, m) for m in range(p)}
        nz = set(zip(*np.nonzero(np.tril(Ld))))
        assert nz <= allowed
        assert fc.count == rep.predicted_flops

    def test_design_precision_factors(self):
        d = gen_mcar(3, (6, 7, 8), 0.3, 4)
        Q = design_precision(d)
        g = ci_graph(Q)
        order = min_degree_order(g, pin_last=[d.p - 1])
        L = numeric_cholesky(Q, order).to_dense()
        PQ = Q.permuted(order).to_dense()
        assert np.linalg.norm(PQ - L @ L.T) <= 1e-12 * np.linalg.norm(PQ)


class TestIncomplete:
    def test_full_pattern_is_exact(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, 8, 0.4)
        Q = spd_from_graph(g, rng)
        full = [np.arange(j, 8) for j in range(8)]
        np.testing.assert_allclose(incomplete_cholesky(Q, full).to_dense(), numeric_cholesky(Q).to_dense(), atol=1e-13)

    def test_diagonal_pattern(self):
        Q = tridiag(5)
        L = incomplete_cholesky(Q, [np.array([j]) for j in range(5)])
        np.testing.assert_allclose(L.to_dense(), np.diag(np.sqrt(Q.diagonal())))

    def test_tridiagonal_exact(self):
        Q = tridiag(6)
        np.testing.assert_allclose(incomplete_cholesky(Q).to_dense(), numeric_cholesky(Q).to_dense(), atol=1e-14)

    def test_absolute_value_pivot(self):
        # restricted update drives the second pivot to 1 - 4 = -3
        Q = SparseMat.from_dense([[1.0, 2.0], [2.0, 1.0]])
        L = incomplete_cholesky(Q)
        np.testing.assert_allclose(L.to_dense(), [[1, 0], [2, np.sqrt(3)]])

    def test_zero_pivot(self):
        with pytest.raises(SingularPreconditionerError):
            incomplete_cholesky(SparseMat.from_dense([[1.0, 1.0], [1.0, 1.0]]))


class TestSolveAndSample:
    def test_identity_solve(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(tri_solve(SparseMat.identity(3), b), b)

    def test_hand_substitution(self):
        L = SparseMat.from_dense([[2.0, 0.0], [1.0, 2.0]])
        np.testing.assert_allclose(tri_solve(L, np.array([2.0, 3.0])), [1, 1])
        fc = FlopCounter()
        tri_solve(L, np.array([2.0, 3.0]), flops=fc)
        assert fc.count == 2 * 3 - 2

    def test_round_trip(self):
        Q = SparseMat.from_dense([[4.0, 2.0], [2.0, 5.0]])
        L = numeric_cholesky(Q)
        x = np.array([0.3, -1.7])
        y = tri_solve(L, tri_solve(L, Q.csr @ x), transposed=True)
        np.testing.assert_allclose(y, x, atol=1e-10)
        F = TriangularFactor(L)
        np.testing.assert_allclose(F.solve(F.solve(Q.csr @ x), transposed=True), x, atol=1e-12)

    def test_zero_diagonal(self):
        with pytest.raises(ZeroDivisionError):
            tri_solve(SparseMat.from_dense([[0.0, 0.0], [1.0, 1.0]]), np.ones(2))

    def test_standard_normal_law(self):
        rng = np.random.default_rng(1)
        L = TriangularFactor(numeric_cholesky(SparseMat.identity(2)))
        draws = np.array([chol_sample(L, np.zeros(2), None, rng) for _ in range(100000)])
        np.testing.assert_allclose(np.cov(draws.T), np.eye(2), atol=4 * np.sqrt(2 / 1e5))

    def test_mean(self):
        Q = SparseMat.from_dense([[2.0, 1.0], [1.0, 2.0]])
        rng = np.random.default_rng(2)
        sampler = CholeskySampler()
        draws = np.array([sampler.sample(Q, np.array([3.0, 3.0]), rng) for _ in range(20000)])
        se = np.sqrt(np.diag(np.linalg.inv(Q.to_dense())) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - 1.0) < 3 * se)

    def test_permuted_order(self):
        rng = np.random.default_rng(3)
        Q = spd_from_graph(random_graph(rng, 6, 0.5), rng)
        order = np.array([3, 0, 5, 1, 4, 2])
        L = numeric_cholesky(Q, order)
        m = rng.standard_normal(6)
        a = chol_sample(L, m, order, np.random.default_rng(9))
        z = np.random.default_rng(9).standard_normal(6)
        Ld = L.to_dense()
        u = np.linalg.solve(Ld.T, np.linalg.solve(Ld, m[order]) + z)
        expected = np.empty(6)
        expected[order] = u
        np.testing.assert_allclose(a, expected, atol=1e-12)

    def test_reproducible(self):
        Q = SparseMat.from_dense([[2.0, 1.0], [1.0, 2.0]])
        a = CholeskySampler().sample(Q, np.zeros(2), np.random.default_rng(5))
        b = CholeskySampler().sample(Q, np.zeros(2), np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
