"""The graph sparse training pipeline.

Three phases: (1) full-graph anchor training that freezes the best-validation
edge scores, logits, parameters, and the extremal spectrum of the
score-weighted adjacency; (2) one-shot magnitude pruning of the anchor scores
to the target sparsity; (3) sparse training with periodic drop/regrow updates
that swap the least important active edges for the most promising pruned
ones, importance being a weighted blend of the spectral-impact scores and the
gradient magnitude of the output divergence against the anchor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import graph_sparsity, normalized_adjacency
from .nn import (
    MaskerParams,
    GcnParams,
    NumericError,
    accuracy,
    cross_entropy,
    cross_entropy_grad,
    gcn_backward,
    gcn_forward,
    init_model,
    kl_output_divergence,
    kl_output_divergence_grad,
    masker_backward,
    masker_forward,
    adam_step,
)
from .spectral import EPS_LAMBDA, eigen_variation_scores, extremal_eig

log = logging.getLogger(__name__)


@dataclass
class GstConfig:
    """All run hyperparameters; defaults target Cora-sized graphs."""

    anchor_epochs: int = 100
    sparse_epochs: int = 400
    update_interval: int = 20
    target_sparsity: float = 0.3
    swap_init_ratio: float = 0.3
    swap_decay: float = 1.0
    spectral_k: int = 20
    beta_semantic: float = 1.0
    beta_topo: float = 1.0
    lr: float = 0.001
    weight_decay: float = 5e-4
    seed: int = 0
    criterion_norm: str = "zscore"
    kl_node_set: str = "all"
    hidden_dim: int = 16
    masker_hidden: int = 16
    eps_lambda: float = EPS_LAMBDA

    def __post_init__(self):
        if self.anchor_epochs < 1:
            raise ValueError("anchor_epochs must be >= 1")
        if self.sparse_epochs < 0:
            raise ValueError("sparse_epochs must be >= 0")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in [0, 1)")
        if not 0.0 < self.swap_init_ratio <= 1.0:
            raise ValueError("swap_init_ratio must lie in (0, 1]")
        if self.swap_decay < 0:
            raise ValueError("swap_decay must be >= 0")
        if self.spectral_k < 1:
            raise ValueError("spectral_k must be >= 1")
        if self.criterion_norm not in ("zscore", "rank", "none"):
            raise ValueError(f"unknown criterion_norm {self.criterion_norm!r}")
        if self.kl_node_set not in ("all", "labeled"):
            raise ValueError(f"unknown kl_node_set {self.kl_node_set!r}")

    def with_sparsity(self, s):
        return replace(self, target_sparsity=s)


@dataclass
class MetricsRow:
    """One emitted metrics record; eval-only fields stay None elsewhere."""

    phase: str
    epoch: int
    interval: int
    train_acc: float
    val_acc: float
    test_acc: float
    loss: float
    sparsity: float
    swap_count: int
    spectral_preservation: float = None
    macs_estimate: float = None


@dataclass
class AnchorGraph:
    """Frozen best-validation snapshot of the full-graph phase."""

    scores: np.ndarray
    logits: np.ndarray
    theta: GcnParams
    psi: MaskerParams
    spectrum: object
    topo_scores: np.ndarray
    val_score: float
    epoch: int


def _evaluate_epoch(graph, features, split, state, mask, epoch, phase):
    """One forward pass: loss + accuracies for the *current* parameters."""
    scores, mtape = masker_forward(state.psi, features, graph)
    a_hat = normalized_adjacency(graph, scores, mask)
    z, tape = gcn_forward(state.theta, a_hat, features)
    loss = cross_entropy(z, split, "train")
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss in {phase} epoch {epoch}")
    return scores, mtape, z, tape, loss


def _update_step(split, state, mask, z, tape, mtape, cfg):
    d_z = cross_entropy_grad(z, split, "train")
    g = gcn_backward(tape, d_z)
    d_scores = g["gate"] if mask is None else g["gate"] * mask
    mg = masker_backward(state.psi, mtape, d_scores)
    grads = {"w1": g["w1"], "w2": g["w2"], "m1": mg["m1"], "m2": mg["m2"]}
    if cfg.weight_decay:
        # classic L2-into-gradient regularization, as in the usual GCN recipe;
        # the loss value itself stays pure cross-entropy
        params = state.params()
        for key in grads:
            grads[key] = grads[key] + cfg.weight_decay * params[key]
    adam_step(state.adam, state.params(), grads, cfg.lr)


def train_anchor(graph, features, split, cfg):
    """Full-graph co-training of GCN and masker; freeze the best-val state.

    Each epoch's candidate is the parameter set entering that epoch together
    with the logits it produces, so the frozen (scores, logits, theta) triple
    is exactly self-consistent.  Returns ``(anchor, end_state, rows)`` where
    ``end_state`` is the live model after the last update, from which the
    sparse phase continues.
    """
    state = init_model(
        cfg.seed, features.shape[1], cfg.hidden_dim, split.num_classes, cfg.masker_hidden
    )
    rows = []
    best = None
    for epoch in range(1, cfg.anchor_epochs + 1):
        scores, mtape, z, tape, loss = _evaluate_epoch(
            graph, features, split, state, None, epoch, "anchor"
        )
        val = accuracy(z, split, "val")
        if best is None or val > best[0]:
            best = (val, epoch, scores.copy(), z.copy(), state.theta.copy(), state.psi.copy())
        rows.append(
            MetricsRow(
                phase="anchor",
                epoch=epoch,
                interval=0,
                train_acc=accuracy(z, split, "train"),
                val_acc=val,
                test_acc=accuracy(z, split, "test"),
                loss=loss,
                sparsity=0.0,
                swap_count=0,
            )
        )
        _update_step(split, state, None, z, tape, mtape, cfg)

    val, epoch, scores, logits, theta, psi = best
    spectrum = extremal_eig(graph, scores, cfg.spectral_k, seed=cfg.seed)
    topo = eigen_variation_scores(scores, graph, spectrum, cfg.eps_lambda)
    anchor = AnchorGraph(
        scores=scores,
        logits=logits,
        theta=theta,
        psi=psi,
        spectrum=spectrum,
        topo_scores=topo,
        val_score=val,
        epoch=epoch,
    )
    return anchor, state, rows


def one_shot_prune(anchor, target_sparsity):
    """Clear the floor(s_g * E) lowest-score edges; ties to the lower edge id."""
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target sparsity must lie in [0, 1)")
    scores = np.asarray(getattr(anchor, "scores", anchor), dtype=np.float64)
    num_edges = scores.size
    n_prune = int(math.floor(target_sparsity * num_edges + 1e-9))
    mask = np.ones(num_edges, dtype=bool)
    order = np.argsort(scores, kind="stable")
    mask[order[:n_prune]] = False
    return mask


def scheduler_upsilon(mu, cfg, active_count):
    """Swap budget at update ``mu``: round(tau * (1 - mu/M)^kappa * active)."""
    m_total = math.ceil(cfg.sparse_epochs / cfg.update_interval)
    if mu < 0 or mu > m_total:
        raise ValueError(f"update index {mu} outside [0, {m_total}]")
    if mu >= m_total:
        return 0
    frac = 1.0 - mu / m_total
    return max(0, int(round(cfg.swap_init_ratio * frac**cfg.swap_decay * active_count)))


def semantic_scores(anchor, state, graph, features, mask, kl_node_mask=None):
    """Gradient magnitude of the anchor-output divergence per edge gate.

    One forward with gates = masker score for active edges and 0 for pruned
    edges, one backward of KL(anchor outputs || current outputs); pruned
    edges get well-defined scores because the gate enters the adjacency
    smoothly at 0.
    """
    scores, _ = masker_forward(state.psi, features, graph)
    a_hat = normalized_adjacency(graph, scores, mask)
    z, tape = gcn_forward(state.theta, a_hat, features)
    d_z = kl_output_divergence_grad(anchor.logits, z, kl_node_mask)
    g = gcn_backward(tape, d_z)
    return np.abs(g["gate"])


def _average_ranks(x):
    """0-based ranks averaged over ties, scaled into [0, 1]."""
    n = x.size
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.arange(n, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j)
        i = j + 1
    return ranks / max(n - 1, 1)


def _normalize_criterion(x, how):
    x = np.asarray(x, dtype=np.float64)
    if how == "none":
        return x
    if how == "zscore":
        std = x.std()
        if std < 1e-30:
            return np.zeros_like(x)
        return (x - x.mean()) / std
    if how == "rank":
        return _average_ranks(x)
    raise ValueError(f"unknown criterion_norm {how!r}")


def combine_criteria(sema, topo, cfg):
    """Blend the two criteria after per-vector normalization."""
    sema = np.asarray(sema, dtype=np.float64)
    topo = np.asarray(topo, dtype=np.float64)
    if sema.shape != topo.shape:
        raise ValueError(f"criterion lengths differ: {sema.shape} vs {topo.shape}")
    s_hat = _normalize_criterion(sema, cfg.criterion_norm)
    t_hat = _normalize_criterion(topo, cfg.criterion_norm)
    return cfg.beta_semantic * s_hat + cfg.beta_topo * t_hat


def update_mask(mask, phi, r):
    """Swap the r lowest-phi active edges for the r highest-phi pruned ones.

    Ties break toward the lower edge id on both sides; ``r`` is clamped to
    what the pools allow.  Returns ``(new_mask, swapped)``; the active count
    never changes.
    """
    mask = np.asarray(mask, dtype=bool).copy()
    phi = np.asarray(phi, dtype=np.float64)
    active_ids = np.flatnonzero(mask)
    pruned_ids = np.flatnonzero(~mask)
    bound = min(active_ids.size, pruned_ids.size)
    if r > bound:
        log.warning("swap count %d exceeds pool bound %d; clamping", r, bound)
        r = bound
    if r <= 0:
        return mask, 0
    drop = active_ids[np.lexsort((active_ids, phi[active_ids]))[:r]]
    grow = pruned_ids[np.lexsort((pruned_ids, -phi[pruned_ids]))[:r]]
    mask[drop] = False
    mask[grow] = True
    return mask, int(r)


@dataclass
class GstResult:
    """Output of a full pipeline run."""

    mask: np.ndarray
    theta: GcnParams
    psi: MaskerParams
    anchor: AnchorGraph
    rows: list
    best_epoch: int
    best_val: float
    best_test: float
    end_state: object = field(repr=False, default=None)


def _sparse_phase(graph, features, split, cfg, anchor, state, mask, dynamic=True):
    """Train on the masked graph for D epochs, optionally swapping edges."""
    rows = []
    best = None
    kl_node_mask = split.train if cfg.kl_node_set == "labeled" else None
    sparsity = graph_sparsity(mask)
    for epoch in range(1, cfg.sparse_epochs + 1):
        scores, mtape, z, tape, loss = _evaluate_epoch(
            graph, features, split, state, mask, epoch, "sparse"
        )
        val = accuracy(z, split, "val")
        test = accuracy(z, split, "test")
        if best is None or val > best[0]:
            best = (val, epoch, test, mask.copy(), state.theta.copy(), state.psi.copy())
        _update_step(split, state, mask, z, tape, mtape, cfg)

        swapped = 0
        if dynamic and epoch % cfg.update_interval == 0:
            # 1-based update index: the final scheduled update is the no-op
            # upsilon(M) = 0, so the last refined mask always gets trained
            mu = epoch // cfg.update_interval
            budget = scheduler_upsilon(mu, cfg, int(mask.sum()))
            if budget > 0:
                sema = semantic_scores(anchor, state, graph, features, mask, kl_node_mask)
                phi = combine_criteria(sema, anchor.topo_scores, cfg)
                mask, swapped = update_mask(mask, phi, budget)
        rows.append(
            MetricsRow(
                phase="sparse",
                epoch=epoch,
                interval=(epoch - 1) // cfg.update_interval,
                train_acc=accuracy(z, split, "train"),
                val_acc=val,
                test_acc=test,
                loss=loss,
                sparsity=sparsity,
                swap_count=swapped,
            )
        )
    if best is None:  # D == 0: fall back to the state entering the phase
        scores, _ = masker_forward(state.psi, features, graph)
        z, _ = gcn_forward(
            state.theta, normalized_adjacency(graph, scores, mask), features
        )
        best = (
            accuracy(z, split, "val"),
            0,
            accuracy(z, split, "test"),
            mask.copy(),
            state.theta.copy(),
            state.psi.copy(),
        )
    return best, rows, mask


def run_gst(graph, features, split, cfg, anchor_bundle=None):
    """Anchor training, one-shot pruning, then dynamic sparse training.

    ``anchor_bundle`` allows reusing a previously trained anchor phase (as
    the sparsity sweep does); it must be the ``(anchor, end_state, rows)``
    triple from :func:`train_anchor` and is never mutated.
    """
    if anchor_bundle is None:
        anchor, end_state, anchor_rows = train_anchor(graph, features, split, cfg)
    else:
        anchor, end_state, anchor_rows = anchor_bundle
    state = end_state.copy()
    mask = one_shot_prune(anchor.scores, cfg.target_sparsity)
    best, sparse_rows, final_mask = _sparse_phase(
        graph, features, split, cfg, anchor, state, mask
    )
    val, epoch, test, best_mask, theta, psi = best
    return GstResult(
        mask=best_mask,
        theta=theta,
        psi=psi,
        anchor=anchor,
        rows=list(anchor_rows) + sparse_rows,
        best_epoch=epoch,
        best_val=val,
        best_test=test,
        end_state=state,
    )


def run_fixed_mask(graph, features, split, cfg, mask):
    """Sparsify-then-train protocol for external (baseline) masks.

    One-shot sparsifiers hand over a fixed subgraph before any training, so
    the model trains from scratch on the masked graph for the full E + D
    budget; only the mask provenance differs from a dense run.
    """
    mask = np.asarray(mask, dtype=bool).copy()
    state = init_model(
        cfg.seed, features.shape[1], cfg.hidden_dim, split.num_classes, cfg.masker_hidden
    )
    rows = []
    best = None
    sparsity = graph_sparsity(mask)
    for epoch in range(1, cfg.anchor_epochs + cfg.sparse_epochs + 1):
        scores, mtape, z, tape, loss = _evaluate_epoch(
            graph, features, split, state, mask, epoch, "sparse"
        )
        val = accuracy(z, split, "val")
        test = accuracy(z, split, "test")
        if best is None or val > best[0]:
            best = (val, epoch, test, state.theta.copy(), state.psi.copy())
        rows.append(
            MetricsRow(
                phase="sparse",
                epoch=epoch,
                interval=0,
                train_acc=accuracy(z, split, "train"),
                val_acc=val,
                test_acc=test,
                loss=loss,
                sparsity=sparsity,
                swap_count=0,
            )
        )
        _update_step(split, state, mask, z, tape, mtape, cfg)
    val, epoch, test, theta, psi = best
    return GstResult(
        mask=mask,
        theta=theta,
        psi=psi,
        anchor=None,
        rows=rows,
        best_epoch=epoch,
        best_val=val,
        best_test=test,
        end_state=state,
    )


@dataclass
class DenseResult:
    theta: GcnParams
    psi: MaskerParams
    rows: list
    best_epoch: int
    best_val: float
    best_test: float


def train_dense(graph, features, split, cfg):
    """Full-graph training for the whole E + D budget; the dense baseline."""
    state = init_model(
        cfg.seed, features.shape[1], cfg.hidden_dim, split.num_classes, cfg.masker_hidden
    )
    rows = []
    best = None
    for epoch in range(1, cfg.anchor_epochs + cfg.sparse_epochs + 1):
        scores, mtape, z, tape, loss = _evaluate_epoch(
            graph, features, split, state, None, epoch, "dense"
        )
        val = accuracy(z, split, "val")
        test = accuracy(z, split, "test")
        if best is None or val > best[0]:
            best = (val, epoch, test, state.theta.copy(), state.psi.copy())
        rows.append(
            MetricsRow(
                phase="anchor",
                epoch=epoch,
                interval=0,
                train_acc=accuracy(z, split, "train"),
                val_acc=val,
                test_acc=test,
                loss=loss,
                sparsity=0.0,
                swap_count=0,
            )
        )
        _update_step(split, state, None, z, tape, mtape, cfg)
    val, epoch, test, theta, psi = best
    return DenseResult(
        theta=theta, psi=psi, rows=rows, best_epoch=epoch, best_val=val, best_test=test
    )


@dataclass
class SweepResult:
    extreme_sparsity: float
    dense_test_acc: float
    points: list  # (sparsity, test_acc, qualified)


def find_extreme_sparsity(graph, features, split, cfg, eps, grid):
    """Largest grid sparsity whose test accuracy stays within eps of dense.

    The anchor phase is trained once and shared across grid points; each
    point runs its own sparse phase from a copy of the anchor-end state.
    Returns 0.0 when no grid point qualifies.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sparsity grid is empty")
    if any(not 0.0 < s < 1.0 for s in grid) or sorted(grid) != grid:
        raise ValueError("grid must be ascending fractions in (0, 1)")
    dense = train_dense(graph, features, split, cfg)
    bundle = train_anchor(graph, features, split, cfg)
    extreme = 0.0
    points = []
    for s in grid:
        res = run_gst(graph, features, split, cfg.with_sparsity(s), anchor_bundle=bundle)
        qualified = res.best_test >= dense.best_test - eps
        if qualified:
            extreme = s
        points.append((s, res.best_test, qualified))
    return SweepResult(
        extreme_sparsity=extreme, dense_test_acc=dense.best_test, points=points
    )
