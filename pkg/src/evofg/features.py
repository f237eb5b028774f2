"""The 23 structural router-feature primitives and the node-by-feature table
they live in: PageRank/betweenness/closeness at target, ego-mean, global-mean,
ego-rank and global-rank scope, edge-average and 1..5-hop feature similarity,
degree, and ego-graph size.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .graph import EGO_RADIUS, Graph, bfs_distances

log = logging.getLogger(__name__)

CATEGORIES = ("PageRank", "Betweenness", "Closeness", "Similarity", "Topology")

_SCOPES = ("t", "ego_mean", "global_mean", "ego_rank", "global_rank")

PRIMITIVE_NAMES = (
    [f"PR_{s}" for s in _SCOPES]
    + [f"BC_{s}" for s in _SCOPES]
    + [f"CC_{s}" for s in _SCOPES]
    + ["Sim_edge_avg"]
    + [f"Sim_{k}hop" for k in range(1, 6)]
    + ["Deg_t", "Ego_size"]
)

PRIMITIVE_CATEGORIES = (
    ["PageRank"] * 5
    + ["Betweenness"] * 5
    + ["Closeness"] * 5
    + ["Similarity"] * 6
    + ["Topology"] * 2
)


def pagerank(g: Graph, damping=0.85, tol=1e-10, max_iter=200) -> np.ndarray:
    """Power iteration with uniform teleport; dangling mass is spread
    uniformly. Stops at L1 change < tol (or max_iter). Sums to 1."""
    n = g.num_nodes
    if n == 1:
        return np.ones(1)
    deg = g.degrees.astype(np.float64)
    dangling = deg == 0
    inv_deg = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    a = g.adjacency()
    p = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        spread = a @ (p * inv_deg) + p[dangling].sum() / n
        p_new = (1.0 - damping) / n + damping * spread
        if np.abs(p_new - p).sum() < tol:
            p = p_new
            break
        p = p_new
    return p


def betweenness(g: Graph, sample_sources=None, seed=0) -> np.ndarray:
    """Brandes betweenness on unweighted shortest paths, endpoints excluded,
    normalized by (N-1)(N-2)/2 pairs.

    sample_sources enables the approximate variant for large graphs: run the
    accumulation from that many random sources and rescale by N/#sources.
    Exact mode is the default and the only one the oracle tests cover.
    """
    n = g.num_nodes
    score = np.zeros(n)
    if n < 3:
        return score
    if sample_sources is None:
        sources = range(n)
        scale = 1.0
    else:
        if sample_sources < 64:
            raise ValueError("approximate betweenness needs >= 64 sources")
        rng = np.random.default_rng(seed)
        sources = rng.choice(n, size=min(sample_sources, n), replace=False)
        scale = n / len(sources)
        log.info("betweenness: approximating from %d sources", len(sources))
    for s in sources:
        stack = []
        preds = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = np.full(n, -1, dtype=np.int64)
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in g.neighbors(v):
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                score[w] += delta[w]
    # each unordered pair was counted from both endpoints
    return score * scale / ((n - 1) * (n - 2))


def closeness(g: Graph) -> np.ndarray:
    """Component-size-scaled closeness: (|R|/(N-1)) * (|R| / sum of
    distances to R), with R the reachable set; isolated nodes get 0."""
    n = g.num_nodes
    out = np.zeros(n)
    if n == 1:
        return out
    for v in range(n):
        dist = bfs_distances(g, v)
        reach = dist > 0
        r = int(reach.sum())
        if r == 0:
            continue
        total = dist[reach].sum()
        out[v] = (r / (n - 1)) * (r / total)
    return out


def _neighborhood_structure(g: Graph):
    """Per-node ego sets (<= EGO_RADIUS hops, center included) and exact-k
    shells for k = 1..5; cached on the graph."""
    cached = g._ops.get("nbhd")
    if cached is not None:
        return cached
    egos = []
    shells = []
    for v in range(g.num_nodes):
        dist = bfs_distances(g, v, max_depth=EGO_RADIUS)
        egos.append(np.flatnonzero(dist >= 0).astype(np.int64))
        shells.append([np.flatnonzero(dist == k).astype(np.int64) for k in range(1, 6)])
    g._ops["nbhd"] = (egos, shells)
    return egos, shells


def _rank_fraction(subset_vals, v_val, size):
    if size <= 1:
        return 0.5
    less = int(np.count_nonzero(subset_vals < v_val))
    ties = int(np.count_nonzero(subset_vals == v_val)) - 1  # exclude v itself
    return (less + 0.5 * ties) / (size - 1)


def scope_expand(values: np.ndarray, g: Graph):
    """Expand a node statistic into the five scope columns
    (target, ego_mean, global_mean, ego_rank, global_rank)."""
    values = np.asarray(values, dtype=np.float64)
    n = g.num_nodes
    egos, _ = _neighborhood_structure(g)
    ego_mean = np.array([values[e].mean() for e in egos])
    global_mean = np.full(n, values.mean())
    ego_rank = np.array(
        [_rank_fraction(values[e], values[v], len(e)) for v, e in enumerate(egos)]
    )
    sorted_vals = np.sort(values)
    left = np.searchsorted(sorted_vals, values, side="left")
    right = np.searchsorted(sorted_vals, values, side="right")
    if n > 1:
        global_rank = (left + 0.5 * (right - left - 1)) / (n - 1)
    else:
        global_rank = np.full(n, 0.5)
    return values.copy(), ego_mean, global_mean, ego_rank, global_rank


def _normalized_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def khop_similarity(g: Graph, xtilde: np.ndarray, k: int) -> np.ndarray:
    """Mean cosine similarity between each node and its exact-k-hop shell;
    empty shells and zero vectors contribute 0."""
    if not 1 <= k <= 5:
        raise ValueError("k must be in 1..5")
    if xtilde.shape[0] != g.num_nodes:
        raise ValueError("feature rows do not match the graph")
    xn = _normalized_rows(np.asarray(xtilde, dtype=np.float64))
    _, shells = _neighborhood_structure(g)
    out = np.zeros(g.num_nodes)
    for v in range(g.num_nodes):
        shell = shells[v][k - 1]
        if len(shell):
            out[v] = (xn[shell] @ xn[v]).mean()
    return out


def edge_avg_similarity(g: Graph, xtilde: np.ndarray) -> float:
    """Mean cosine similarity across undirected edges; 0 on edgeless graphs."""
    if g.num_edges == 0:
        log.warning("%s: edgeless graph, edge-average similarity set to 0", g.name)
        return 0.0
    xn = _normalized_rows(np.asarray(xtilde, dtype=np.float64))
    return float((xn[g.edges[:, 0]] * xn[g.edges[:, 1]]).sum(axis=1).mean())


@dataclass
class RouterFeatureTable:
    """Node-by-feature matrix with names, categories, an active mask, and
    per-column provenance ("primitive" or the expression that built it).

    Columns 0..22 are always the primitives in their fixed order; generated
    columns are appended and never removed (deselection only clears the
    active flag, so earlier expressions stay evaluable on new graphs).
    """

    matrix: np.ndarray
    names: list[str]
    categories: list[str]
    provenance: list = field(default_factory=list)
    active: np.ndarray = None

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(len(self.names), dtype=bool)
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate column names")
        if self.matrix.shape[1] != len(self.names):
            raise ValueError("matrix width does not match names")

    @property
    def num_nodes(self):
        return self.matrix.shape[0]

    def column(self, name):
        return self.matrix[:, self.names.index(name)]

    def has_column(self, name):
        return name in self.names

    def append_column(self, name, values, expr):
        if name in self.names:
            raise ValueError(f"column {name!r} already exists")
        self.matrix = np.column_stack([self.matrix, np.asarray(values, np.float64)])
        self.names.append(name)
        self.categories.append(expr.category)
        self.provenance.append(expr)
        self.active = np.append(self.active, True)

    def active_names(self):
        return [n for n, a in zip(self.names, self.active) if a]

    def set_active(self, kept_names):
        kept = set(kept_names)
        self.active = np.array([n in kept for n in self.names])

    def active_by_category(self):
        out = {c: [] for c in CATEGORIES}
        for name, cat, act in zip(self.names, self.categories, self.active):
            if act:
                out[cat].append(name)
        return out

    def standardized_active(self) -> np.ndarray:
        """Active columns z-scored per column over nodes (constant columns
        become zeros); this is the router's input representation."""
        sub = self.matrix[:, self.active]
        mean = sub.mean(axis=0)
        std = sub.std(axis=0)
        return np.divide(sub - mean, std, out=np.zeros_like(sub), where=std > 0)

    def export_text(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(self.names) + "\n")
            for row in self.matrix:
                fh.write("\t".join("%.17g" % v for v in row) + "\n")


def compute_primitives(g: Graph, xtilde: np.ndarray) -> RouterFeatureTable:
    """Assemble the 23 primitive columns in their canonical order."""
    egos, _ = _neighborhood_structure(g)
    cols = []
    for stat in (pagerank(g), betweenness(g), closeness(g)):
        cols.extend(scope_expand(stat, g))
    cols.append(np.full(g.num_nodes, edge_avg_similarity(g, xtilde)))
    for k in range(1, 6):
        cols.append(khop_similarity(g, xtilde, k))
    cols.append(g.degrees.astype(np.float64))
    cols.append(np.array([len(e) for e in egos], dtype=np.float64))
    return RouterFeatureTable(
        matrix=np.column_stack(cols),
        names=list(PRIMITIVE_NAMES),
        categories=list(PRIMITIVE_CATEGORIES),
        provenance=["primitive"] * len(PRIMITIVE_NAMES),
    )
