import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossedcg.designs import (
    DesignSpec,
    Family,
    InfeasibleDesignError,
    add_interaction,
    add_nested,
    component_count,
    gen_biregular_bipartite,
    gen_counterexample_c4,
    gen_er_bipartite,
    gen_mcar,
    gen_pairwise_disconnected,
    gen_uniform_cells,
    gen_worst_case,
    mcar_scenario,
    read_design,
    write_design,
)
from crossedcg.sparse_core import (
    CollinearityWarning,
    FactorDesign,
    PrecisionModel,
    assemble_precision,
    build_design_matrix,
)
from crossedcg.spectral import dense_sym_eig, normalized_adjacency_r

# Edge list of the worst-case example drawn for G=7, d=2 (one-based levels).
DRAWN_EDGES = {
    1: {1, 2, 3}, 2: {2, 4, 5}, 3: {3, 6, 7}, 4: {1, 2, 4},
    5: {3, 4, 5}, 6: {5, 6, 7}, 7: {1, 6, 7},
}


def degrees(design, k):
    return np.bincount(design.assignments[:, k], minlength=design.G[k])


class TestMCAR:
    def test_full_table(self):
        d = gen_mcar(2, (2, 2), 1.0, seed=0)
        assert d.N == 4
        assert {tuple(r) for r in d.assignments} == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_binomial_count(self):
        d = gen_mcar(2, (100, 100), 0.2, seed=1)
        sd = math.sqrt(1e4 * 0.2 * 0.8)
        assert abs(d.N - 2000) < 4 * sd

    def test_scenario_c_expected_size(self):
        # pi = G^(3/2 - 5) on G^5 cells: E[N] = G^1.5 before the level check
        from crossedcg.designs import _sample_cells

        G = 10
        pi = G ** (1.5 - 5)
        rng = np.random.default_rng(0)
        counts = np.array([_sample_cells((G,) * 5, pi, rng).shape[0] for _ in range(400)])
        assert abs(counts.mean() - G**1.5) < 4 * math.sqrt(G**1.5 / counts.size)
        d = mcar_scenario("c", G, seed=0)
        assert d.K == 5 and degrees(d, 4).min() >= 1

    def test_infeasible_raises(self):
        with pytest.raises(InfeasibleDesignError, match="expected N"):
            gen_mcar(2, (50, 50), 1e-4, seed=0, max_retries=5)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_every_level_observed_and_reproducible(self, seed):
        a = gen_mcar(3, (4, 5, 6), 0.3, seed)
        b = gen_mcar(3, (4, 5, 6), 0.3, seed)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        for k in range(3):
            assert degrees(a, k).min() >= 1
        assert len({tuple(r) for r in a.assignments}) == a.N

    def test_uniform_cells_size(self):
        d = gen_uniform_cells((10, 20), 150, seed=0)
        assert d.N == 150
        assert len({tuple(r) for r in d.assignments}) == 150

    def test_uniform_cells_too_many(self):
        with pytest.raises(InfeasibleDesignError):
            gen_uniform_cells((2, 2), 5, seed=0)


class TestBipartite:
    def test_complete_biregular(self):
        d = gen_biregular_bipartite(4, 4, 4, 4, seed=0)
        assert d.N == 16

    def test_degree_audit(self):
        d = gen_biregular_bipartite(4, 8, 4, 2, seed=3)
        np.testing.assert_array_equal(degrees(d, 0), 4)
        np.testing.assert_array_equal(degrees(d, 1), 2)

    def test_handshake_violation(self):
        with pytest.raises(ValueError, match="handshake"):
            gen_biregular_bipartite(3, 5, 2, seed=0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_simple_and_regular(self, seed):
        d = gen_biregular_bipartite(30, 20, 4, 6, seed=seed)
        np.testing.assert_array_equal(degrees(d, 0), 4)
        np.testing.assert_array_equal(degrees(d, 1), 6)
        assert len({tuple(r) for r in d.assignments}) == d.N

    def test_er_complete(self):
        assert gen_er_bipartite(3, 4, 1.0, seed=0).N == 12

    def test_er_binomial_count(self):
        d = gen_er_bipartite(50, 50, 0.3, seed=2)
        assert abs(d.N - 750) < 4 * math.sqrt(2500 * 0.3 * 0.7)


class TestWorstCase:
    def test_matches_drawn_example(self):
        d = gen_worst_case(7, 2)
        edges = {}
        for a, b in d.assignments + 1:
            edges.setdefault(int(a), set()).add(int(b))
        assert edges == DRAWN_EDGES

    @pytest.mark.parametrize("G,d", [(20, 2), (30, 3), (41, 4)])
    def test_factor_one_degrees(self, G, d):
        design = gen_worst_case(G, d)
        np.testing.assert_array_equal(degrees(design, 0)[:-1], d + 1)

    def test_deterministic(self):
        np.testing.assert_array_equal(gen_worst_case(25, 3).assignments, gen_worst_case(25, 3).assignments)

    def test_linear_nnz(self):
        ratios = []
        for G in (20, 40, 80):
            design = gen_worst_case(G, 3)
            Q = assemble_precision(build_design_matrix(design), PrecisionModel(np.ones(design.p)))
            ratios.append(Q.nnz / (design.p * 3))
        assert max(ratios) < 3.0

    @pytest.mark.parametrize("G,d", [(2, 2), (5, 1)])
    def test_invalid(self, G, d):
        with pytest.raises(ValueError):
            gen_worst_case(G, d)


class TestPairwiseDisconnected:
    def test_small_instance(self):
        d = gen_pairwise_disconnected(2)
        np.testing.assert_array_equal(d.assignments + 1, [[1, 1, 2], [1, 1, 1], [2, 2, 2], [2, 2, 1]])

    @pytest.mark.parametrize("G", [2, 5, 11])
    def test_component_counts(self, G):
        d = gen_pairwise_disconnected(G)
        assert component_count(d, 0, 1) == G
        assert component_count(d, 0, 2) == 1
        assert component_count(d, 1, 2) == 1
        assert d.N == G * G

    def test_counterexample(self):
        d = gen_counterexample_c4()
        for k, h in ((0, 1), (0, 2), (1, 2)):
            assert component_count(d, k, h) == 1
        U = build_design_matrix(d).to_dense()[:, :6]
        assert 6 - np.linalg.matrix_rank(U.T @ U) == 3
        eigs = dense_sym_eig(normalized_adjacency_r(d))
        np.testing.assert_allclose(eigs[:3], -0.5, atol=1e-12)


class TestAugment:
    def test_interaction_complete(self):
        d = add_interaction(gen_mcar(2, (2, 2), 1.0, 0), 0, 1)
        assert d.G[-1] == 4

    def test_interaction_observed_pairs_only(self):
        d = FactorDesign((1, 2), np.array([[0, 0], [0, 1], [0, 0]]))
        assert add_interaction(d, 0, 1).G[-1] == 2

    def test_interaction_nested_in_parents(self):
        d = add_interaction(gen_mcar(2, (6, 7), 0.5, 1), 0, 1)
        for k in (0, 1):
            assert component_count(d, k, 2) == d.G[k]

    def test_interaction_needs_distinct_factors(self):
        with pytest.raises(ValueError):
            add_interaction(gen_mcar(2, (2, 2), 1.0, 0), 1, 1)

    def test_nested_groups(self):
        base = gen_mcar(2, (6, 3), 1.0, 0)
        d = add_nested(base, 0, {0: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1})
        assert d.G[-1] == 2
        assert component_count(d, 0, 2) == 2

    def test_singleton_groups_copy_parent(self):
        base = gen_mcar(2, (4, 3), 1.0, 0)
        d = add_nested(base, 0, np.arange(4))
        np.testing.assert_array_equal(d.assignments[:, -1], base.assignments[:, 0])

    def test_single_group_flagged(self):
        base = gen_mcar(2, (4, 3), 1.0, 0)
        with pytest.warns(CollinearityWarning):
            d = add_nested(base, 0, np.zeros(4, dtype=int))
        assert d.G[-1] == 1

    def test_unmapped_level(self):
        with pytest.raises(ValueError, match="no group"):
            add_nested(gen_mcar(2, (3, 3), 1.0, 0), 0, {0: 0, 1: 1})


class TestSpecAndIO:
    def test_spec_dispatch(self):
        d = DesignSpec(Family.WORST_CASE, G=(7,), d=(2,)).generate()
        np.testing.assert_array_equal(d.assignments, gen_worst_case(7, 2).assignments)
        assert DesignSpec("mcar", K=2, G=(5,), pi=0.5, seed=3).generate().K == 2

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DesignSpec(Family.MCAR, pi=0.0)
        with pytest.raises(ValueError):
            DesignSpec(Family.WORST_CASE, G=(7,), d=(1,))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        base = gen_mcar(2, (4, 5), 0.6, 1)
        slopes = (np.column_stack([np.ones(base.N), rng.standard_normal(base.N)]), None)
        d = FactorDesign(base.G, base.assignments, slopes)
        write_design(d, tmp_path / "d.txt", tmp_path / "s.txt")
        assert (tmp_path / "d.txt").read_text().splitlines()[0] == f"2 4 5 {d.N}"
        back = read_design(tmp_path / "d.txt", tmp_path / "s.txt")
        np.testing.assert_array_equal(back.assignments, d.assignments)
        np.testing.assert_array_equal(back.slope_covariates[0], slopes[0])
        assert back.slope_covariates[1] is None

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.txt").write_text("2 4\n1 1\n")
        with pytest.raises(ValueError, match="header"):
            read_design(tmp_path / "d.txt")
