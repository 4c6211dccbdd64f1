"""Graph, feature, and dataset representation.

Graphs are simple and undirected: one canonical (u, v) pair with u < v per
edge, plus a CSR view with both directions materialized for fast traversal
and matvecs.  Self-loops never live in the edge list; they are injected only
inside :func:`normalized_adjacency` so that aggregation stays defined for
isolated nodes and the prunable edge universe stays clean.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Raised when a dataset directory is missing, malformed, or inconsistent."""


def canonicalize_edges(pairs, num_nodes=None):
    """Reduce an arbitrary pair list to canonical undirected edges.

    Pairs are sorted so u < v, self-loops are dropped, duplicates (including
    the reversed direction) are merged, and the result is lexicographically
    sorted.  Returns ``(edges, num_duplicates, num_self_loops)``.
    """
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if num_nodes is not None and arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise DatasetError(
            f"edge endpoint out of range [0, {num_nodes}): "
            f"min={arr.min()}, max={arr.max()}"
        )
    loops = arr[:, 0] == arr[:, 1]
    num_self_loops = int(loops.sum())
    arr = arr[~loops]
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    stacked = np.stack([lo, hi], axis=1)
    if stacked.shape[0] == 0:
        return stacked.reshape(0, 2), 0, num_self_loops
    edges = np.unique(stacked, axis=0)
    num_duplicates = stacked.shape[0] - edges.shape[0]
    return edges, num_duplicates, num_self_loops


@dataclass(frozen=True)
class UndirectedGraph:
    """Immutable undirected graph over ``num_nodes`` nodes.

    ``edges`` holds canonical (u, v) pairs with u < v, lexicographically
    sorted; edge ids are row indices into this array.  The CSR arrays
    materialize both directions: entry k is the directed arc
    ``row_idx[k] -> col_idx[k]`` and belongs to canonical edge
    ``edge_of[k]``.
    """

    num_nodes: int
    edges: np.ndarray
    row_ptr: np.ndarray
    col_idx: np.ndarray
    row_idx: np.ndarray
    edge_of: np.ndarray
    _pair_to_id: dict = field(repr=False)

    @classmethod
    def from_pairs(cls, num_nodes, pairs, warn=True):
        """Build a graph from a raw pair list, canonicalizing first."""
        if num_nodes < 0:
            raise ValueError("num_nodes must be nonnegative")
        edges, dups, loops = canonicalize_edges(pairs, num_nodes)
        if warn and (dups or loops):
            log.warning(
                "canonicalization dropped %d duplicate pair(s) and %d self-loop(s)",
                dups,
                loops,
            )
        return cls.from_canonical_edges(num_nodes, edges)

    @classmethod
    def from_canonical_edges(cls, num_nodes, edges):
        """Build the CSR view from an already-canonical edge array."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        m = edges.shape[0]
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        eid = np.concatenate([np.arange(m), np.arange(m)])
        order = np.lexsort((dst, src))
        src, dst, eid = src[order], dst[order], eid[order]
        row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(row_ptr, src + 1, 1)
        row_ptr = np.cumsum(row_ptr)
        pair_to_id = {(int(u), int(v)): i for i, (u, v) in enumerate(edges)}
        return cls(
            num_nodes=num_nodes,
            edges=edges,
            row_ptr=row_ptr,
            col_idx=dst,
            row_idx=src,
            edge_of=eid,
            _pair_to_id=pair_to_id,
        )

    @property
    def num_edges(self):
        return self.edges.shape[0]

    @property
    def degrees(self):
        return np.diff(self.row_ptr)

    def neighbors(self, v):
        return self.col_idx[self.row_ptr[v] : self.row_ptr[v + 1]]

    def edge_index_of(self, u, v):
        """Canonical edge id of the unordered pair {u, v}."""
        key = (u, v) if u < v else (v, u)
        return self._pair_to_id[key]

    def has_edge(self, u, v):
        key = (u, v) if u < v else (v, u)
        return key in self._pair_to_id


@dataclass(frozen=True)
class LabeledSplit:
    """Per-node class labels plus disjoint train/val/test masks."""

    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        n = self.labels.shape[0]
        for name in ("train", "val", "test"):
            m = getattr(self, name)
            if m.shape != (n,) or m.dtype != np.bool_:
                raise ValueError(f"{name} mask must be a boolean vector of length {n}")
        overlap = (
            (self.train & self.val) | (self.train & self.test) | (self.val & self.test)
        )
        if overlap.any():
            raise ValueError("train/val/test masks must be disjoint")
        used = self.train | self.val | self.test
        if used.any():
            lab = self.labels[used]
            if lab.min() < 0:
                raise ValueError("split nodes must carry a valid label")

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def mask(self, which):
        """Resolve a mask selector: 'train' | 'val' | 'test' or a bool array."""
        if isinstance(which, str):
            return getattr(self, which)
        return np.asarray(which, dtype=bool)


def _read_matrix(path, dtype):
    try:
        data = np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric token ({exc})") from exc
    return data


def load_dataset(directory):
    """Load ``graph.edges`` / ``features.csv`` / ``labels.csv`` / ``splits.csv``.

    Returns ``(UndirectedGraph, features, LabeledSplit)``.  The node count is
    fixed by the feature matrix; all other files are validated against it.
    Duplicate and self-loop edges are dropped with a logged count.
    """
    paths = {
        name: os.path.join(directory, name)
        for name in ("graph.edges", "features.csv", "labels.csv", "splits.csv")
    }
    for name, p in paths.items():
        if not os.path.exists(p):
            raise DatasetError(f"missing dataset file: {p}")

    features = _read_matrix(paths["features.csv"], np.float64)
    if not np.isfinite(features).all():
        raise DatasetError("features.csv contains non-finite values")
    n = features.shape[0]

    labels = _read_matrix(paths["labels.csv"], np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DatasetError(
            f"labels.csv has {labels.shape[0]} rows, expected {n} (feature rows)"
        )

    flags = _read_matrix(paths["splits.csv"], np.int64)
    if flags.shape != (n, 3):
        raise DatasetError(f"splits.csv must be {n} rows of 3 flags, got {flags.shape}")

    pairs = []
    with open(paths["graph.edges"]) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2:
                raise DatasetError(
                    f"{paths['graph.edges']}:{lineno}: expected 'u<TAB>v', got {line!r}"
                )
            try:
                pairs.append((int(tokens[0]), int(tokens[1])))
            except ValueError as exc:
                raise DatasetError(
                    f"{paths['graph.edges']}:{lineno}: non-numeric token"
                ) from exc

    graph = UndirectedGraph.from_pairs(n, np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    split = LabeledSplit(
        labels=labels,
        train=flags[:, 0].astype(bool),
        val=flags[:, 1].astype(bool),
        test=flags[:, 2].astype(bool),
    )
    return graph, features, split


def save_dataset(directory, graph, features, split):
    """Write the identical on-disk format that :func:`load_dataset` reads."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "graph.edges"), "w") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    np.savetxt(os.path.join(directory, "features.csv"), features, delimiter=",")
    np.savetxt(os.path.join(directory, "labels.csv"), split.labels, fmt="%d")
    flags = np.stack([split.train, split.val, split.test], axis=1).astype(np.int64)
    np.savetxt(os.path.join(directory, "splits.csv"), flags, fmt="%d", delimiter=",")


def generate_sbm(seed, num_blocks, nodes_per_block, p_in, p_out, feat_dim, feat_shift):
    """Sample a stochastic-block-model node-classification task.

    Labels are block ids; features are standard normal with ``feat_shift``
    added to coordinate b for nodes of block b; the split is a seeded 60/20/20
    shuffle.  Fully deterministic for a given argument tuple.
    """
    if num_blocks < 1 or nodes_per_block < 1:
        raise ValueError("need at least one block and one node per block")
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if feat_shift > 0 and feat_dim < num_blocks:
        raise ValueError("feat_dim must be >= num_blocks when feat_shift > 0")

    rng = np.random.default_rng(seed)
    n = num_blocks * nodes_per_block
    labels = np.repeat(np.arange(num_blocks), nodes_per_block)

    iu, iv = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[iv], p_in, p_out)
    keep = rng.random(iu.shape[0]) < prob
    edges = np.stack([iu[keep], iv[keep]], axis=1)
    graph = UndirectedGraph.from_canonical_edges(n, edges)

    features = rng.standard_normal((n, feat_dim))
    if feat_shift != 0.0:
        for b in range(num_blocks):
            features[labels == b, b] += feat_shift

    perm = rng.permutation(n)
    n_train = int(0.6 * n)
    n_val = int(0.2 * n)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[perm[:n_train]] = True
    val[perm[n_train : n_train + n_val]] = True
    test[perm[n_train + n_val :]] = True

    return graph, features, LabeledSplit(labels=labels, train=train, val=val, test=test)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Degree-normalized weighted adjacency with unit self-loops.

    Represents ``D^{-1/2} (W + I) D^{-1/2}`` where W carries the gated edge
    weights and D is the row-sum degree of W + I.  Off-diagonal values are
    stored per CSR entry; the diagonal separately.
    """

    graph: UndirectedGraph
    gate: np.ndarray
    deg: np.ndarray
    entry_vals: np.ndarray
    diag_vals: np.ndarray

    def matmat(self, x):
        """Compute ``A_hat @ x`` through the CSR entries."""
        g = self.graph
        out = self.diag_vals[:, None] * x
        if g.col_idx.size:
            contrib = self.entry_vals[:, None] * x[g.col_idx]
            np.add.at(out, g.row_idx, contrib)
        return out

    def to_dense(self):
        g = self.graph
        dense = np.zeros((g.num_nodes, g.num_nodes))
        dense[g.row_idx, g.col_idx] = self.entry_vals
        dense[np.arange(g.num_nodes), np.arange(g.num_nodes)] = self.diag_vals
        return dense


def normalized_adjacency(graph, weights, mask=None):
    """Build the symmetric normalized operator for gated edge weights.

    ``weights`` is one value per canonical edge; ``mask`` (optional) is a
    boolean active-set multiplied in before normalization.  Degrees are
    recomputed on every call since they depend on the current gate values.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (graph.num_edges,):
        raise ValueError(f"weights must have length {graph.num_edges}")
    if not np.isfinite(w).all():
        raise ValueError("edge weights must be finite")
    gate = w if mask is None else w * np.asarray(mask, dtype=np.float64)
    # tolerate tiny negative values so derivative probes around a zero gate
    # stay legal; anything beyond probe scale is a real sign error
    if gate.size and gate.min() < -1e-4:
        raise ValueError("negative gated edge weight")
    deg = np.ones(graph.num_nodes)
    if graph.num_edges:
        np.add.at(deg, graph.edges[:, 0], gate)
        np.add.at(deg, graph.edges[:, 1], gate)
    inv_sqrt = 1.0 / np.sqrt(deg)
    entry_vals = gate[graph.edge_of] * inv_sqrt[graph.row_idx] * inv_sqrt[graph.col_idx]
    return NormalizedAdjacency(
        graph=graph, gate=gate, deg=deg, entry_vals=entry_vals, diag_vals=1.0 / deg
    )


def weighted_adjacency_dense(graph, weights, mask=None):
    """Dense symmetric W with W[u, v] = weight * mask per canonical edge."""
    w = np.asarray(weights, dtype=np.float64)
    if mask is not None:
        w = w * np.asarray(mask, dtype=np.float64)
    dense = np.zeros((graph.num_nodes, graph.num_nodes))
    if graph.num_edges:
        u, v = graph.edges[:, 0], graph.edges[:, 1]
        dense[u, v] = w
        dense[v, u] = w
    return dense


def adjacency_matvec(graph, weights, x):
    """Matvec with the (un-normalized, loop-free) weighted adjacency."""
    out = np.zeros_like(x, dtype=np.float64)
    if graph.col_idx.size:
        np.add.at(out, graph.row_idx, weights[graph.edge_of] * x[graph.col_idx])
    return out


def graph_sparsity(mask):
    """Fraction of edges removed: 1 - active/total (0 for an edgeless graph)."""
    m = np.asarray(mask, dtype=bool)
    if m.size == 0:
        return 0.0
    return 1.0 - int(m.sum()) / m.size


def active_fraction(mask):
    m = np.asarray(mask, dtype=bool)
    if m.size == 0:
        return 1.0
    return int(m.sum()) / m.size


def jaccard_edge_similarity(graph, edge_id):
    """Jaccard overlap of the endpoint neighborhoods, excluding u and v.

    Returns |N(u) cap N(v)| / |N(u) cup N(v)| over open neighborhoods with
    both endpoints removed; 0 when the union is empty.
    """
    u, v = graph.edges[edge_id]
    nu = graph.neighbors(u)
    nv = graph.neighbors(v)
    nu = nu[(nu != u) & (nu != v)]
    nv = nv[(nv != u) & (nv != v)]
    inter = np.intersect1d(nu, nv, assume_unique=True).size
    union = nu.size + nv.size - inter
    if union == 0:
        return 0.0
    return inter / union
