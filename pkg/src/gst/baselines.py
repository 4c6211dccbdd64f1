"""Comparison sparsifiers and the edge-perturbation protocol."""

from __future__ import annotations

import math

import numpy as np

from .graph import UndirectedGraph, jaccard_edge_similarity


def _prune_count(num_edges, target_sparsity):
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target sparsity must lie in [0, 1)")
    return int(math.floor(target_sparsity * num_edges + 1e-9))


def random_sparsify(graph, target_sparsity, seed):
    """Remove floor(s_g * E) uniformly chosen edges; deterministic per seed."""
    n_prune = _prune_count(graph.num_edges, target_sparsity)
    mask = np.ones(graph.num_edges, dtype=bool)
    if n_prune:
        rng = np.random.default_rng(seed)
        drop = rng.choice(graph.num_edges, size=n_prune, replace=False)
        mask[drop] = False
    return mask


def local_similarity_scores(graph):
    """Per-edge log-rank/log-degree scores; lower means more important.

    Each node ranks its incident edges by Jaccard similarity (rank 1 = most
    similar, ties to the lower edge id) and assigns the edge
    log(1 + rank) / log(1 + degree); the edge keeps the better (minimum) of
    its two endpoint views.
    """
    e = graph.num_edges
    jac = np.array([jaccard_edge_similarity(graph, i) for i in range(e)])
    score = np.full(e, np.inf)
    for node in range(graph.num_nodes):
        lo, hi = graph.row_ptr[node], graph.row_ptr[node + 1]
        incident = graph.edge_of[lo:hi]
        deg = incident.size
        if deg == 0:
            continue
        order = np.lexsort((incident, -jac[incident]))
        ranked = incident[order]
        exponent = np.log1p(np.arange(1, deg + 1)) / np.log1p(deg)
        np.minimum.at(score, ranked, exponent)
    return score


def local_similarity_sparsify(graph, target_sparsity):
    """Keep the (1 - s_g) fraction of edges with the lowest rank scores.

    Fully deterministic: no RNG is involved, and ties break toward the lower
    edge id.
    """
    n_prune = _prune_count(graph.num_edges, target_sparsity)
    mask = np.ones(graph.num_edges, dtype=bool)
    if n_prune:
        score = local_similarity_scores(graph)
        ids = np.arange(graph.num_edges)
        drop = np.lexsort((ids, -score))[:n_prune]
        mask[drop] = False
    return mask


def perturb_edges(graph, fraction, seed, max_tries=100):
    """Randomly relocate one endpoint of a fraction of the edges.

    For each selected edge a coin flip picks the endpoint to move and the
    replacement node is drawn uniformly; draws producing self-loops or
    duplicate edges are rejected and resampled up to ``max_tries`` times,
    after which the edge is kept unchanged.  Node and edge counts are always
    preserved.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = graph.num_nodes
    n_sel = int(math.floor(fraction * graph.num_edges + 1e-9))
    rng = np.random.default_rng(seed)
    edge_set = {(int(u), int(v)) for u, v in graph.edges}
    if n_sel:
        selected = np.sort(rng.choice(graph.num_edges, size=n_sel, replace=False))
    else:
        selected = np.zeros(0, dtype=np.int64)
    for eid in selected:
        u, v = (int(x) for x in graph.edges[eid])
        edge_set.discard((u, v))
        placed = (u, v)
        for _ in range(max_tries):
            move_first = rng.integers(2) == 0
            candidate = int(rng.integers(n))
            pair = (candidate, v) if move_first else (u, candidate)
            a, b = min(pair), max(pair)
            if a == b or (a, b) in edge_set:
                continue
            placed = (a, b)
            break
        edge_set.add(placed)
    edges = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)
    return UndirectedGraph.from_canonical_edges(n, edges)
