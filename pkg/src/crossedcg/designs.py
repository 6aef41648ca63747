"""Generators for crossed designs.

All generators return a :class:`~crossedcg.sparse_core.FactorDesign` with
zero-based level indices. Text files use one-based levels.
"""

from __future__ import annotations

import enum
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .sparse_core import CollinearityWarning, FactorDesign

__all__ = [
    "InfeasibleDesignError",
    "Family",
    "DesignSpec",
    "gen_mcar",
    "gen_uniform_cells",
    "gen_biregular_bipartite",
    "gen_er_bipartite",
    "gen_worst_case",
    "gen_pairwise_disconnected",
    "gen_counterexample_c4",
    "add_interaction",
    "add_nested",
    "mcar_scenario",
    "write_design",
    "read_design",
    "component_count",
]


class InfeasibleDesignError(RuntimeError):
    pass


class Family(enum.Enum):
    MCAR = "mcar"
    BIREGULAR = "biregular"
    ER_BIPARTITE = "er_bipartite"
    WORST_CASE = "worst_case"
    PAIRWISE_DISCONNECTED = "pairwise_disconnected"
    COUNTEREXAMPLE_C4 = "counterexample_c4"


@dataclass(frozen=True)
class DesignSpec:
    family: Family
    K: int = 2
    G: tuple[int, ...] = ()
    pi: float | None = None
    d: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "G", tuple(int(g) for g in self.G))
        object.__setattr__(self, "d", tuple(int(x) for x in self.d))
        if self.pi is not None and not 0 < self.pi <= 1:
            raise ValueError("pi must lie in (0, 1]")
        if self.family is Family.WORST_CASE and self.d and self.d[0] < 2:
            raise ValueError("the worst-case design needs d >= 2")

    def generate(self) -> FactorDesign:
        f = self.family
        if f is Family.MCAR:
            G = self.G if len(self.G) == self.K else self.G[:1] * self.K
            return gen_mcar(self.K, G, self.pi, self.seed)
        if f is Family.BIREGULAR:
            d2 = self.d[1] if len(self.d) > 1 else None
            return gen_biregular_bipartite(self.G[0], self.G[-1], self.d[0], d2, self.seed)
        if f is Family.ER_BIPARTITE:
            return gen_er_bipartite(self.G[0], self.G[-1], self.pi, self.seed)
        if f is Family.WORST_CASE:
            return gen_worst_case(self.G[0], self.d[0])
        if f is Family.PAIRWISE_DISCONNECTED:
            return gen_pairwise_disconnected(self.G[0])
        return gen_counterexample_c4()


def _all_levels_seen(levels: np.ndarray, G) -> bool:
    return all(np.unique(levels[:, k]).size == g for k, g in enumerate(G))


def _sample_cells(G, pi: float, rng: np.random.Generator) -> np.ndarray:
    total = math.prod(G)
    if total <= 2_000_000:
        keep = np.flatnonzero(rng.random(total) < pi)
    else:
        if total >= 2**62:
            raise InfeasibleDesignError(f"contingency table with {total} cells exceeds the addressable range")
        n = int(rng.binomial(total, pi))
        keep = np.sort(rng.choice(total, size=n, replace=False))
    return np.column_stack(np.unravel_index(keep, G)) if keep.size else np.empty((0, len(G)), np.int64)


def gen_mcar(K: int, G_list, pi: float, seed: int, max_retries: int = 100) -> FactorDesign:
    """Observe each cell of the ``G_1 x ... x G_K`` table independently with probability ``pi``.

    Draws leaving some level unobserved are discarded as a whole and redrawn.
    """
    G = tuple(int(g) for g in G_list)
    if len(G) != K:
        raise ValueError(f"expected {K} level counts, got {len(G)}")
    if not 0 < pi <= 1:
        raise ValueError("pi must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    expected = math.prod(G) * pi
    for _ in range(max_retries):
        cells = _sample_cells(G, pi, rng)
        if cells.shape[0] and _all_levels_seen(cells, G):
            return FactorDesign(G, cells)
    raise InfeasibleDesignError(
        f"no draw out of {max_retries} observed every level (expected N = {expected:.1f}, max G = {max(G)})"
    )


def mcar_scenario(scenario: str, G: int, seed: int) -> FactorDesign:
    """Scenarios with ``G_k = G``: (a) K=2, pi=20/G; (b) K=2, pi=G^-1/2; (c) K=5, pi=G^(3/2-K)."""
    if scenario == "a":
        return gen_mcar(2, (G, G), min(1.0, 20.0 / G), seed)
    if scenario == "b":
        return gen_mcar(2, (G, G), G ** -0.5, seed)
    if scenario == "c":
        return gen_mcar(5, (G,) * 5, float(G) ** (1.5 - 5), seed)
    raise ValueError(f"unknown scenario '{scenario}'")


def gen_uniform_cells(G_list, N: int, seed: int, max_retries: int = 100) -> FactorDesign:
    """Observe ``N`` distinct cells chosen uniformly at random."""
    G = tuple(int(g) for g in G_list)
    total = math.prod(G)
    if N > total:
        raise InfeasibleDesignError(f"cannot place {N} observations in {total} cells")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        keep = np.sort(rng.choice(total, size=N, replace=False))
        cells = np.column_stack(np.unravel_index(keep, G))
        if _all_levels_seen(cells, G):
            return FactorDesign(G, cells)
    raise InfeasibleDesignError(f"no draw out of {max_retries} observed every level")


def gen_er_bipartite(G1: int, G2: int, pi: float, seed: int, max_retries: int = 100) -> FactorDesign:
    return gen_mcar(2, (G1, G2), pi, seed, max_retries)


def _duplicate_rows(edges: np.ndarray, G2: int) -> np.ndarray:
    key = edges[:, 0] * G2 + edges[:, 1]
    order = np.argsort(key, kind="stable")
    dup = np.zeros(key.size, dtype=bool)
    dup[order[1:]] = key[order[1:]] == key[order[:-1]]
    return np.flatnonzero(dup)


def gen_biregular_bipartite(G1: int, G2: int, d1: int, d2: int | None = None, seed: int = 0,
                            max_swaps: int | None = None) -> FactorDesign:
    """Random simple bipartite graph with degrees ``d1`` (factor 1) and ``d2`` (factor 2).

    Stubs are matched uniformly at random; multi-edges are then removed by
    double-edge swaps with uniformly chosen partner edges, which preserves
    both degree sequences.
    """
    if d2 is None:
        if (G1 * d1) % G2:
            raise ValueError(f"handshake violated: G1*d1 = {G1 * d1} is not a multiple of G2 = {G2}")
        d2 = G1 * d1 // G2
    if G1 * d1 != G2 * d2:
        raise ValueError(f"handshake violated: G1*d1 = {G1 * d1} != G2*d2 = {G2 * d2}")
    if d1 > G2 or d2 > G1 or d1 < 1:
        raise ValueError("degrees must satisfy 1 <= d1 <= G2 and d2 <= G1")
    if d1 == G2:
        a, b = np.meshgrid(np.arange(G1), np.arange(G2), indexing="ij")
        return FactorDesign((G1, G2), np.column_stack([a.ravel(), b.ravel()]))
    rng = np.random.default_rng(seed)
    E = G1 * d1
    edges = np.column_stack([np.repeat(np.arange(G1), d1), rng.permutation(np.repeat(np.arange(G2), d2))])
    budget = max_swaps if max_swaps is not None else 1000 * E
    used = 0
    present = {}
    for a, b in edges:
        present[(a, b)] = present.get((a, b), 0) + 1
    bad = list(_duplicate_rows(edges, G2))
    while bad:
        e = bad.pop()
        a, b = edges[e]
        if present[(a, b)] <= 1:
            continue
        while True:
            used += 1
            if used > budget:
                raise InfeasibleDesignError(
                    f"swap budget of {budget} exhausted with multi-edges remaining (G1={G1}, G2={G2}, d1={d1})"
                )
            f = int(rng.integers(E))
            c, dd = edges[f]
            if c == a or dd == b or (a, dd) in present or (c, b) in present:
                continue
            present[(a, b)] -= 1
            present[(c, dd)] -= 1
            if present[(c, dd)] == 0:
                del present[(c, dd)]
            edges[e, 1], edges[f, 1] = dd, b
            present[(a, dd)] = 1
            present[(c, b)] = 1
            break
    return FactorDesign((G1, G2), edges[np.lexsort((edges[:, 1], edges[:, 0]))])


def gen_worst_case(G: int, d: int) -> FactorDesign:
    """The deterministic adversarial K=2 design with ``G_1 = G_2 = G``.

    For ``g < G`` (one-based) factor-1 level ``g`` connects to factor-2
    level ``j`` when (a) ``j = g``, (b) ``g < j`` and ``j - 2`` lies in
    ``S_g``, or (c) ``g > j`` and ``j - 1`` lies in ``S_g``, where
    ``S_g = {x mod (G-1) : d(g-1) <= x < dg}``. Level ``G`` then connects
    to every factor-2 level whose degree is at most ``d``.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    if G <= d:
        raise ValueError(f"need G > d, got G={G}, d={d}")
    edges = []
    for g in range(1, G):
        S = {x % (G - 1) for x in range(d * (g - 1), d * g)}
        for j in range(1, G + 1):
            if j == g or (g < j and (j - 2) in S) or (g > j and (j - 1) in S):
                edges.append((g, j))
    deg2 = np.bincount([j for _, j in edges], minlength=G + 1)
    edges.extend((G, j) for j in range(1, G + 1) if deg2[j] <= d)
    levels = np.asarray(edges, dtype=np.int64) - 1
    return FactorDesign((G, G), levels)


def gen_pairwise_disconnected(G: int) -> FactorDesign:
    """K=3, N=G^2: observation i gets levels (ceil(i/G), ceil(i/G), (i mod G)+1)."""
    if G < 2:
        raise ValueError("G must be at least 2")
    i = np.arange(1, G * G + 1)
    a = -(-i // G)
    levels = np.column_stack([a, a, i % G + 1]) - 1
    return FactorDesign((G, G, G), levels)


def gen_counterexample_c4() -> FactorDesign:
    """Three observations on a 2x2x2 table whose pairwise graphs are all connected."""
    return FactorDesign((2, 2, 2), np.array([[1, 1, 2], [2, 2, 2], [2, 1, 1]]) - 1)


def _dense_codes(cols: np.ndarray) -> tuple[np.ndarray, int]:
    _, codes = np.unique(cols, axis=0, return_inverse=True)
    codes = codes.ravel()
    return codes, int(codes.max()) + 1 if codes.size else 0


def add_interaction(design: FactorDesign, k: int, h: int, *more: int) -> FactorDesign:
    """Append the interaction of factors ``k, h, ...`` indexed over the observed combinations only."""
    factors = (k, h) + more
    if len(set(factors)) != len(factors):
        raise ValueError("interaction factors must be distinct")
    codes, n_levels = _dense_codes(design.assignments[:, list(factors)])
    return design.with_factor(codes, n_levels, "x".join(str(f) for f in factors))


def add_nested(design: FactorDesign, parent_k: int, group_map) -> FactorDesign:
    """Append a factor grouping the levels of ``parent_k``.

    ``group_map[g]`` is the group of parent level ``g``; groups are
    re-indexed densely over the values used.
    """
    G = design.G[parent_k]
    if isinstance(group_map, dict):
        missing = [g for g in range(G) if g not in group_map]
        if missing:
            raise ValueError(f"parent levels {missing} have no group")
        groups = np.array([group_map[g] for g in range(G)])
    else:
        groups = np.asarray(group_map)
        if groups.size != G:
            raise ValueError(f"group map covers {groups.size} of {G} parent levels")
    _, groups = np.unique(groups, return_inverse=True)
    n_groups = int(groups.max()) + 1
    if n_groups == 1:
        warnings.warn("a single group makes the nested factor collinear with the intercept",
                      CollinearityWarning, stacklevel=2)
    return design.with_factor(groups.ravel()[design.assignments[:, parent_k]], n_groups, f"nested{parent_k}")


def component_count(design: FactorDesign, k: int, h: int) -> int:
    """Connected components of the bipartite graph between factors ``k`` and ``h``."""
    Gk, Gh = design.G[k], design.G[h]
    parent = np.arange(Gk + Gh)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    pairs = np.unique(design.assignments[:, [k, h]], axis=0)
    for a, b in pairs:
        ra, rb = find(a), find(Gk + b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return len({find(x) for x in range(Gk + Gh)})


# ---------------------------------------------------------------------------
# Text serialization


def write_design(design: FactorDesign, path: str | os.PathLike, slope_path: str | os.PathLike | None = None) -> None:
    """Header ``K G_1..G_K N`` then one row of one-based levels per observation."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(" ".join(str(x) for x in (design.K, *design.G, design.N)) + "\n")
        np.savetxt(fh, design.assignments + 1, fmt="%d")
    if slope_path is not None:
        dims = [0 if (design.slope_covariates is None or w is None) else w.shape[1]
                for w in (design.slope_covariates or (None,) * design.K)]
        blocks = [w for w in (design.slope_covariates or ()) if w is not None]
        with open(slope_path, "w", encoding="ascii") as fh:
            fh.write(" ".join(str(x) for x in dims) + "\n")
            if blocks:
                np.savetxt(fh, np.hstack(blocks), fmt="%.17g")


def read_design(path: str | os.PathLike, slope_path: str | os.PathLike | None = None) -> FactorDesign:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        try:
            K = int(header[0])
            G = tuple(int(x) for x in header[1:1 + K])
            N = int(header[1 + K])
        except (IndexError, ValueError):
            raise ValueError(f"{path}: header must read 'K G_1..G_K N'") from None
        levels = np.loadtxt(fh, dtype=np.int64, ndmin=2)
    if levels.shape != (N, K) and not (N == 0 and levels.size == 0):
        raise ValueError(f"{path}: expected {N} rows of {K} levels, got shape {levels.shape}")
    slopes = None
    if slope_path is not None:
        with open(slope_path, "r", encoding="ascii") as fh:
            dims = [int(x) for x in fh.readline().split()]
            values = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        if len(dims) != K:
            raise ValueError(f"{slope_path}: expected {K} slope dimensions")
        slopes, col = [], 0
        for D in dims:
            slopes.append(None if D == 0 else values[:, col:col + D])
            col += D
        slopes = tuple(slopes)
    return FactorDesign(G, levels - 1, slopes)
