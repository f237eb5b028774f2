"""Undirected attributed graphs: representation, file I/O, neighborhoods,
and a seeded synthetic generator with planted anomalies.

File layout (one directory per graph):
  edges.txt     one edge per line, "u<TAB>v", 0-based, '#' comments allowed
  features.txt  first line "N d", then N lines of d space-separated reals
  labels.txt    N lines of "0" or "1" (1 = anomaly)
"""

from __future__ import annotations

import logging
import os

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

EGO_RADIUS = 6  # neighborhood radius that defines a node's ego graph

EDGE_FILE = "edges.txt"
FEATURE_FILE = "features.txt"
LABEL_FILE = "labels.txt"


class GraphFormatError(ValueError):
    """Malformed input file (carries the offending path/line)."""


class Graph:
    """Immutable undirected graph with node features and anomaly labels.

    Edges are stored deduplicated with u < v; adjacency is kept as CSR-style
    neighbor lists. ``labels`` may be None for graphs used only for scoring.
    """

    def __init__(self, num_nodes, edges, features, labels, name="graph"):
        self.num_nodes = int(num_nodes)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            lo = np.minimum(edges[:, 0], edges[:, 1])
            hi = np.maximum(edges[:, 0], edges[:, 1])
            edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
        self.edges = edges
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.shape[0] != self.num_nodes:
            raise GraphFormatError(
                f"feature rows {self.features.shape[0]} != num_nodes {self.num_nodes}"
            )
        if not np.isfinite(self.features).all():
            raise GraphFormatError("features contain NaN/Inf")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.num_nodes,):
                raise GraphFormatError("label count != num_nodes")
            if not np.isin(labels, (0, 1)).all():
                raise GraphFormatError("labels must be 0/1")
        self.labels = labels
        self.name = name
        self._build_adjacency()
        self._ops = {}
        for arr in (self.edges, self.features):
            arr.setflags(write=False)
        if self.labels is not None:
            self.labels.setflags(write=False)

    def _build_adjacency(self):
        n = self.num_nodes
        if self.edges.size and self.edges.max() >= n:
            raise GraphFormatError("edge endpoint out of range")
        if self.edges.size and (self.edges[:, 0] == self.edges[:, 1]).any():
            raise GraphFormatError("self-loop in edge list")
        deg = np.zeros(n, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        indices = np.zeros(indptr[-1], dtype=np.int64)
        fill = indptr[:-1].copy()
        for u, v in self.edges:
            indices[fill[u]] = v
            fill[u] += 1
            indices[fill[v]] = u
            fill[v] += 1
        # sort each neighbor list for deterministic iteration
        for i in range(n):
            indices[indptr[i] : indptr[i + 1]].sort()
        self.indptr = indptr
        self.indices = indices
        self.degrees = deg
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)
        self.degrees.setflags(write=False)

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def neighbors(self, v):
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def adjacency(self):
        """Symmetric 0/1 adjacency as scipy CSR."""
        n = self.num_nodes
        if "A" not in self._ops:
            if self.num_edges:
                u, v = self.edges[:, 0], self.edges[:, 1]
                data = np.ones(2 * self.num_edges)
                a = sp.coo_matrix(
                    (data, (np.concatenate([u, v]), np.concatenate([v, u]))),
                    shape=(n, n),
                ).tocsr()
            else:
                a = sp.csr_matrix((n, n))
            self._ops["A"] = a
        return self._ops["A"]

    def sym_norm_selfloops(self):
        """D^-1/2 (A+I) D^-1/2 with degrees counted after adding self-loops."""
        if "S_hat" not in self._ops:
            a = self.adjacency() + sp.identity(self.num_nodes, format="csr")
            d = np.asarray(a.sum(axis=1)).ravel()
            dinv = 1.0 / np.sqrt(d)
            self._ops["S_hat"] = sp.diags(dinv) @ a @ sp.diags(dinv)
        return self._ops["S_hat"]

    def sym_norm(self):
        """D^-1/2 A D^-1/2; rows/cols of isolated nodes are zero."""
        if "P_sym" not in self._ops:
            d = self.degrees.astype(np.float64)
            dinv = np.divide(1.0, np.sqrt(d), out=np.zeros_like(d), where=d > 0)
            self._ops["P_sym"] = sp.diags(dinv) @ self.adjacency() @ sp.diags(dinv)
        return self._ops["P_sym"]

    def neighbor_mean(self):
        """D^-1 A; rows of degree-0 nodes are zero (neighbor mean = 0)."""
        if "D_inv_A" not in self._ops:
            d = self.degrees.astype(np.float64)
            dinv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
            self._ops["D_inv_A"] = sp.diags(dinv) @ self.adjacency()
        return self._ops["D_inv_A"]

    def equals(self, other):
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
            and (
                (self.labels is None and other.labels is None)
                or (
                    self.labels is not None
                    and other.labels is not None
                    and np.array_equal(self.labels, other.labels)
                )
            )
        )


def bfs_distances(g: Graph, v: int, max_depth: int | None = None) -> np.ndarray:
    """Shortest-path distances from v; -1 for nodes beyond reach/depth."""
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    dist[v] = 0
    frontier = [v]
    depth = 0
    while frontier and (max_depth is None or depth < max_depth):
        depth += 1
        nxt = []
        for u in frontier:
            for w in g.neighbors(u):
                if dist[w] < 0:
                    dist[w] = depth
                    nxt.append(w)
        frontier = nxt
    return dist


def k_hop_set(g: Graph, v: int, k: int) -> np.ndarray:
    """Nodes at shortest-path distance exactly k from v, ascending."""
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = bfs_distances(g, v, max_depth=k)
    return np.flatnonzero(dist == k).astype(np.int64)


def ego_graph(g: Graph, v: int):
    """Induced subgraph on v's <=6-hop neighborhood plus the old->new map."""
    if not 0 <= v < g.num_nodes:
        raise IndexError(f"node {v} out of range")
    dist = bfs_distances(g, v, max_depth=EGO_RADIUS)
    nodes = np.flatnonzero(dist >= 0).astype(np.int64)
    mapping = {int(old): new for new, old in enumerate(nodes)}
    inside = np.zeros(g.num_nodes, dtype=bool)
    inside[nodes] = True
    kept = [
        (mapping[int(a)], mapping[int(b)])
        for a, b in g.edges
        if inside[a] and inside[b]
    ]
    sub = Graph(
        num_nodes=len(nodes),
        edges=np.array(kept, dtype=np.int64).reshape(-1, 2),
        features=g.features[nodes],
        labels=None if g.labels is None else g.labels[nodes],
        name=f"{g.name}/ego{v}",
    )
    return sub, mapping


def _parse_matrix_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise GraphFormatError(f"{path}:1: expected header 'N d'")
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError as exc:
            raise GraphFormatError(f"{path}:1: non-integer header") from exc
        rows = np.empty((n, d), dtype=np.float64)
        for i in range(n):
            line = fh.readline()
            if not line:
                raise GraphFormatError(f"{path}: expected {n} feature rows, got {i}")
            parts = line.split()
            if len(parts) != d:
                raise GraphFormatError(f"{path}:{i + 2}: expected {d} values")
            try:
                rows[i] = [float(p) for p in parts]
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{i + 2}: bad real value") from exc
    return rows


def _parse_edges(path, num_nodes):
    pairs = []
    dropped_loops = 0
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{ln}: expected 'u<TAB>v'")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{ln}: non-integer endpoint") from exc
            if u < 0 or v < 0 or u >= num_nodes or v >= num_nodes:
                raise GraphFormatError(
                    f"{path}:{ln}: node index out of range [0, {num_nodes})"
                )
            if u == v:
                dropped_loops += 1
                continue
            pairs.append((min(u, v), max(u, v)))
    if dropped_loops:
        log.warning("%s: dropped %d self-loop(s)", path, dropped_loops)
    return np.array(sorted(set(pairs)), dtype=np.int64).reshape(-1, 2)


def _parse_labels(path, num_nodes):
    labels = np.empty(num_nodes, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        for i in range(num_nodes):
            line = fh.readline()
            if not line:
                raise GraphFormatError(f"{path}: expected {num_nodes} labels, got {i}")
            token = line.strip()
            if token not in ("0", "1"):
                raise GraphFormatError(f"{path}:{i + 1}: label must be 0 or 1")
            labels[i] = int(token)
    return labels


def load_graph(edge_path, feature_path, label_path=None, name="graph") -> Graph:
    """Load a graph from the three-file layout; directed input is symmetrized.

    label_path may be None for scoring-only graphs (labels stay unset).
    """
    features = _parse_matrix_file(feature_path)
    edges = _parse_edges(edge_path, features.shape[0])
    labels = None if label_path is None else _parse_labels(label_path, features.shape[0])
    return Graph(features.shape[0], edges, features, labels, name=name)


def load_graph_dir(path, name=None, with_labels=True) -> Graph:
    """Load a graph from a directory following the standard file names."""
    return load_graph(
        os.path.join(path, EDGE_FILE),
        os.path.join(path, FEATURE_FILE),
        os.path.join(path, LABEL_FILE) if with_labels else None,
        name=name or os.path.basename(os.path.normpath(path)),
    )


def save_graph(g: Graph, path):
    """Export in the three-file layout; float64 values round-trip exactly."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, EDGE_FILE), "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    with open(os.path.join(path, FEATURE_FILE), "w", encoding="utf-8") as fh:
        fh.write(f"{g.num_nodes} {g.features.shape[1]}\n")
        for row in g.features:
            fh.write(" ".join("%.17g" % x for x in row) + "\n")
    if g.labels is not None:
        with open(os.path.join(path, LABEL_FILE), "w", encoding="utf-8") as fh:
            for y in g.labels:
                fh.write(f"{y}\n")
    return path


def gen_synthetic(
    n_nodes,
    n_features,
    anomaly_rate,
    structure_seed,
    planted_kind,
    n_communities=4,
    name=None,
) -> Graph:
    """Seeded community graph with planted anomalies.

    Base structure: stochastic block model with ``n_communities`` blocks and
    heterogeneous (power-law-ish) expected degrees; node features are drawn
    around community means. Anomalies are planted per ``planted_kind``:
      structural  drop the node's edges and rewire it to uniformly random
                  partners (a low-degree cross-community bridge)
      attribute   shift a random half of the feature coordinates by +2 std
      mixed       both treatments
    """
    if not 0.0 < anomaly_rate < 0.5:
        raise ValueError("anomaly_rate must lie in (0, 0.5)")
    if n_nodes < 20:
        raise ValueError("n_nodes must be >= 20")
    if planted_kind not in ("structural", "attribute", "mixed"):
        raise ValueError(f"unknown planted_kind {planted_kind!r}")

    rng = np.random.default_rng(structure_seed)
    comm = rng.integers(0, n_communities, size=n_nodes)
    # degree propensities: bounded Pareto tail for hub/leaf heterogeneity
    prop = (1.0 - rng.random(n_nodes)) ** (-1.0 / 2.5)
    prop = np.minimum(prop, 3.0)
    prop /= prop.mean()

    p_in = min(1.0, 32.0 / n_nodes * n_communities / 4.0)
    p_out = p_in / 10.0
    iu, ju = np.triu_indices(n_nodes, k=1)
    base = np.where(comm[iu] == comm[ju], p_in, p_out)
    probs = np.clip(base * prop[iu] * prop[ju], 0.0, 1.0)
    keep = rng.random(len(probs)) < probs
    edge_set = {(int(a), int(b)) for a, b in zip(iu[keep], ju[keep])}

    # communities sit close together in attribute space so planted shifts,
    # not community membership, dominate the feature signal
    spread = 0.1
    noise = 0.5
    means = rng.normal(0.0, spread, size=(n_communities, n_features))
    x = means[comm] + rng.normal(0.0, noise, size=(n_nodes, n_features))

    n_anom = int(np.floor(anomaly_rate * n_nodes))
    n_anom = max(1, n_anom)
    anomalies = rng.choice(n_nodes, size=n_anom, replace=False)
    labels = np.zeros(n_nodes, dtype=np.int64)
    labels[anomalies] = 1

    rewire_edges = 1
    if planted_kind in ("structural", "mixed"):
        for v in anomalies:
            incident = [e for e in edge_set if v in e]
            for e in incident:
                edge_set.discard(e)
            targets = rng.choice(
                n_nodes, size=min(rewire_edges, n_nodes - 1), replace=False
            )
            for t in targets:
                if t != v:
                    edge_set.add((min(int(v), int(t)), max(int(v), int(t))))

    if planted_kind in ("attribute", "mixed"):
        col_std = x.std(axis=0)
        for v in anomalies:
            cols = rng.choice(n_features, size=n_features // 2, replace=False)
            x[v, cols] += 2.0 * col_std[cols]

    edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)
    gname = name or f"syn_{planted_kind}_c{n_communities}_s{structure_seed}"
    return Graph(n_nodes, edges, x, labels, name=gname)
