"""Citation network construction and descriptive statistics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

log = logging.getLogger(__name__)

EXACT_PATH_THRESHOLD = 5000
PATH_SAMPLE_SOURCES = 1000


@dataclass(frozen=True)
class CitationGraph:
    """Directed citation graph restricted to linked articles.

    ``nodes[i]`` is the corpus index of graph node ``i``. ``edges`` holds
    (citing, cited) pairs in graph-node indices, sorted and unique.
    """
    nodes: np.ndarray
    edges: np.ndarray
    excluded: tuple[int, ...] = ()
    ids: tuple[str, ...] | None = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        """Number of edges of the symmetrized simple graph."""
        return len(self.undirected_edges)

    @property
    def directed(self) -> sp.csr_matrix:
        e = self.edges
        return sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.n, self.n))

    @property
    def undirected_edges(self) -> np.ndarray:
        if len(self.edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        u = np.sort(self.edges, axis=1)
        return np.unique(u, axis=0)

    @property
    def symmetric(self) -> sp.csr_matrix:
        return _sym_adjacency(self.n, self.undirected_edges)

    def node_of(self) -> dict[int, int]:
        return {int(c): i for i, c in enumerate(self.nodes)}

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], ids: Sequence[str] | None = None) -> "CitationGraph":
        """Build from (citing, cited) pairs over ``n`` candidate nodes."""
        e = np.asarray([(int(a), int(b)) for a, b in edges if a != b], dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= n):
            raise ValueError("edge endpoint out of range")
        e = np.unique(e, axis=0)
        linked = np.unique(e.ravel())
        remap = np.full(n, -1, dtype=np.int64)
        remap[linked] = np.arange(len(linked))
        excluded = tuple(int(i) for i in np.setdiff1d(np.arange(n), linked))
        sub_ids = tuple(ids[i] for i in linked) if ids is not None else None
        return cls(linked, remap[e] if len(e) else e, excluded, sub_ids)


def _sym_adjacency(n: int, und: np.ndarray) -> sp.csr_matrix:
    if len(und) == 0:
        return sp.csr_matrix((n, n))
    r = np.concatenate([und[:, 0], und[:, 1]])
    c = np.concatenate([und[:, 1], und[:, 0]])
    return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))


def build_citation_graph(corpus) -> CitationGraph:
    """Nodes are articles with at least one internal citation link."""
    g = CitationGraph.from_edges(len(corpus), corpus.internal_references(), corpus.ids)
    if g.excluded:
        log.info("excluded %d articles without internal citation links", len(g.excluded))
    return g


# ---------------------------------------------------------------------------
# statistics


@dataclass
class GraphStats:
    n: int
    m: int
    giant_nodes: int
    giant_edges: int
    diameter: int
    average_degree: float
    max_degree: int
    C: float
    L: float
    C_r: float | None = None
    L_r: float | None = None
    C_ratio: float | None = None
    L_ratio: float | None = None
    power_law_alpha: float | None = None
    path_sources: int | None = None
    extra: dict = field(default_factory=dict)

    def to_report(self) -> dict:
        """Flat mapping keyed by the descriptive table's row names."""
        return {
            "Number of nodes": self.n,
            "Number of edges": self.m,
            "Nodes in giant component": self.giant_nodes,
            "Edges in giant component": self.giant_edges,
            "Diameter": self.diameter,
            "Average degree": self.average_degree,
            "Maximum degree": self.max_degree,
            "Cluster Coefficient (C)": self.C,
            "Mean path length (L)": self.L,
            "Erdos-Renyi average C_r": self.C_r,
            "Erdos-Renyi average L_r": self.L_r,
            "C/C_r": self.C_ratio,
            "L/L_r": self.L_ratio,
            "Power-law exponent": self.power_law_alpha,
            "Path-length source sample": self.path_sources,
        }


def clustering_coefficient(adj: sp.spmatrix) -> float:
    """Mean of local clustering coefficients; nodes of degree < 2 count as 0."""
    A = sp.csr_matrix(adj, dtype=np.float64)
    n = A.shape[0]
    if n == 0:
        return 0.0
    deg = np.asarray(A.sum(axis=1)).ravel()
    tri = np.asarray((A @ A).multiply(A).sum(axis=1)).ravel() / 2.0
    denom = deg * (deg - 1) / 2.0
    local = np.divide(tri, denom, out=np.zeros(n), where=denom > 0)
    return float(local.mean())


def giant_component(adj: sp.spmatrix) -> np.ndarray:
    """Node indices of the largest connected component (lowest label on ties)."""
    n = adj.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    _, labels = csgraph.connected_components(adj, directed=False)
    sizes = np.bincount(labels)
    return np.flatnonzero(labels == int(np.argmax(sizes)))


def _path_summary(adj: sp.csr_matrix, sources: np.ndarray) -> tuple[float, int]:
    total = 0
    pairs = 0
    ecc = 0
    for start in range(0, len(sources), 256):
        d = csgraph.shortest_path(adj, method="D", unweighted=True, directed=False,
                                  indices=sources[start:start + 256])
        d = d[np.isfinite(d)].astype(np.int64)
        total += int(d.sum())
        pairs += int(np.count_nonzero(d))
        if d.size:
            ecc = max(ecc, int(d.max()))
    return (total / pairs if pairs else 0.0), ecc


def graph_stats(graph, seed: int = 0, exact_threshold: int = EXACT_PATH_THRESHOLD,
                sample_sources: int = PATH_SAMPLE_SOURCES, er_replications: int = 0,
                power_law: bool = True) -> GraphStats:
    """Descriptive statistics of the symmetrized simple graph.

    L is the mean shortest-path length over connected pairs of the giant
    component, exact below ``exact_threshold`` nodes and otherwise estimated
    from ``sample_sources`` random sources (the diameter is then a lower bound).
    """
    A = graph.symmetric if hasattr(graph, "symmetric") else sp.csr_matrix(graph)
    n = A.shape[0]
    if n == 0:
        raise ValueError("graph is empty")
    m = int(A.nnz // 2)
    deg = np.asarray(A.sum(axis=1)).ravel().astype(np.int64)
    giant = giant_component(A)
    G = A[giant][:, giant].tocsr()
    if len(giant) <= exact_threshold:
        sources = np.arange(len(giant))
        n_sources = None
    else:
        rng = np.random.default_rng(seed)
        sources = np.sort(rng.choice(len(giant), size=sample_sources, replace=False))
        n_sources = sample_sources
    L, diam = _path_summary(G, sources)
    stats = GraphStats(
        n=n, m=m, giant_nodes=len(giant), giant_edges=int(G.nnz // 2), diameter=diam,
        average_degree=2.0 * m / n, max_degree=int(deg.max()), C=clustering_coefficient(A),
        L=L, path_sources=n_sources,
    )
    if power_law:
        try:
            stats.power_law_alpha = fit_power_law(deg[deg >= 1])
        except ValueError:
            stats.power_law_alpha = None
    if er_replications:
        stats.C_r, stats.L_r = er_baseline(n, m, er_replications, seed,
                                            exact_threshold=exact_threshold, sample_sources=sample_sources)
        stats.C_ratio = stats.C / stats.C_r if stats.C_r else None
        stats.L_ratio = stats.L / stats.L_r if stats.L_r else None
    return stats


def gnm_random_graph(n: int, m: int, rng: np.random.Generator) -> sp.csr_matrix:
    """Uniform simple graph with ``n`` nodes and exactly ``m`` edges."""
    total = n * (n - 1) // 2
    if m > total:
        raise ValueError(f"m={m} exceeds the {total} possible edges")
    if m == 0:
        return sp.csr_matrix((n, n))
    k = rng.choice(total, size=m, replace=False)
    # linear index k -> (i, j) with i < j, row-major over the upper triangle
    i = (n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    j = (k + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2).astype(np.int64)
    return _sym_adjacency(n, np.column_stack([i, j]))


def er_baseline(n: int, m: int, replications: int = 100, seed: int = 0,
                exact_threshold: int = EXACT_PATH_THRESHOLD,
                sample_sources: int = PATH_SAMPLE_SOURCES) -> tuple[float, float]:
    """Mean clustering and giant-component path length over G(n, m) draws."""
    rng = np.random.default_rng(seed)
    cs, ls = [], []
    for _ in range(replications):
        A = gnm_random_graph(n, m, rng)
        cs.append(clustering_coefficient(A))
        giant = giant_component(A)
        G = A[giant][:, giant].tocsr()
        if len(giant) <= exact_threshold:
            sources = np.arange(len(giant))
        else:
            sources = np.sort(rng.choice(len(giant), size=sample_sources, replace=False))
        ls.append(_path_summary(G, sources)[0])
    return float(np.mean(cs)), float(np.mean(ls))


def fit_power_law(degrees, x_min: float = 1.0) -> float:
    """Continuous maximum-likelihood exponent ``1 + n / sum(ln(x / x_min))``."""
    x = np.asarray(degrees, dtype=np.float64)
    x = x[x >= x_min]
    if len(x) < 2:
        raise ValueError("need at least two values >= x_min")
    s = float(np.log(x / x_min).sum())
    if s == 0.0:
        raise ValueError("degenerate sample: every value equals x_min")
    return 1.0 + len(x) / s


def sample_power_law(alpha: float, size: int, x_min: float = 1.0, rng=None) -> np.ndarray:
    """Continuous power-law draws by inverse CDF."""
    rng = np.random.default_rng(rng)
    return x_min * (1.0 - rng.random(size)) ** (-1.0 / (alpha - 1.0))


def stochastic_block_model(sizes: Sequence[int], p_in: float, p_out: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Undirected SBM; returns (edges with i < j, block label per node)."""
    rng = np.random.default_rng(rng)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = len(labels)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(p)) < p
    return np.column_stack([iu[keep], ju[keep]]).astype(np.int64), labels


def write_stats_report(stats: GraphStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_report(), indent=2) + "\n", encoding="utf-8")


def stats_dict(stats: GraphStats) -> dict:
    return asdict(stats)
