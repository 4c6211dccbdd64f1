"""Differentiable compute core: 2-layer GCN, edge masker, losses, Adam.

The reverse pass is hand-derived for this fixed architecture rather than
going through a general autodiff engine, which keeps every gradient —
including the gradient with respect to each edge's multiplicative gate,
through the degree-dependent normalization — explicit and checkable by
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class NumericError(Exception):
    """Raised when a forward/backward pass produces non-finite values."""


# ---------------------------------------------------------------------------
# parameters and optimizer state


@dataclass
class GcnParams:
    w1: np.ndarray
    w2: np.ndarray

    def copy(self):
        return GcnParams(self.w1.copy(), self.w2.copy())


@dataclass
class MaskerParams:
    m1: np.ndarray
    m2: np.ndarray

    def copy(self):
        return MaskerParams(self.m1.copy(), self.m2.copy())


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, one (m, v) pair per named array."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )

    def copy(self):
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_step(state, params, grads, lr):
    """One in-place Adam update over a dict of parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {key}")
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = state.m[key] / (1 - b1**state.t)
        v_hat = state.v[key] / (1 - b2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class ModelState:
    """Everything the training loop mutates: GCN + masker params and moments."""

    theta: GcnParams
    psi: MaskerParams
    adam: AdamState

    def params(self):
        return {
            "w1": self.theta.w1,
            "w2": self.theta.w2,
            "m1": self.psi.m1,
            "m2": self.psi.m2,
        }

    def copy(self):
        return ModelState(self.theta.copy(), self.psi.copy(), self.adam.copy())


def init_model(seed, feat_dim, hidden, num_classes, masker_hidden):
    """Glorot-initialized GCN + masker with fresh optimizer state."""
    rng = np.random.default_rng(seed)
    theta = GcnParams(
        w1=_glorot(rng, feat_dim, hidden),
        w2=_glorot(rng, hidden, num_classes),
    )
    psi = MaskerParams(
        m1=_glorot(rng, 2 * feat_dim, masker_hidden),
        m2=_glorot(rng, masker_hidden, 1),
    )
    state = ModelState(theta=theta, psi=psi, adam=None)
    state.adam = AdamState.for_params(state.params())
    return state


# ---------------------------------------------------------------------------
# edge masker


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MaskerTape:
    pair_feats: np.ndarray  # (2E, 2D): both endpoint orders stacked
    hidden: np.ndarray      # (2E, H_m) tanh activations
    scores: np.ndarray      # (E,) in (0, 1)


def masker_forward(psi, features, graph):
    """Score every canonical edge with the symmetrized 2-layer MLP.

    The MLP sees [x_u || x_v]; averaging both endpoint orders before the
    logistic squashing makes score(u, v) == score(v, u) exactly.
    """
    e = graph.num_edges
    if e == 0:
        return np.zeros(0), MaskerTape(
            pair_feats=np.zeros((0, 2 * features.shape[1])),
            hidden=np.zeros((0, psi.m1.shape[1])),
            scores=np.zeros(0),
        )
    fu = features[graph.edges[:, 0]]
    fv = features[graph.edges[:, 1]]
    pair_feats = np.concatenate(
        [np.concatenate([fu, fv], axis=1), np.concatenate([fv, fu], axis=1)], axis=0
    )
    hidden = np.tanh(pair_feats @ psi.m1)
    raw = (hidden @ psi.m2).reshape(2, e)
    scores = _sigmoid(0.5 * (raw[0] + raw[1]))
    return scores, MaskerTape(pair_feats=pair_feats, hidden=hidden, scores=scores)


def masker_scores(psi, features, graph):
    """Per-edge scores in (0, 1); see :func:`masker_forward`."""
    return masker_forward(psi, features, graph)[0]


def masker_backward(psi, tape, d_scores):
    """Gradients of a scalar loss w.r.t. the masker weights.

    ``d_scores`` is dLoss/dscore per canonical edge.
    """
    e = d_scores.shape[0]
    if e == 0:
        return {"m1": np.zeros_like(psi.m1), "m2": np.zeros_like(psi.m2)}
    s = tape.scores
    dz = d_scores * s * (1.0 - s)
    d_raw = np.concatenate([dz, dz])[:, None] * 0.5
    d_m2 = tape.hidden.T @ d_raw
    d_hidden = d_raw @ psi.m2.T
    d_pre = d_hidden * (1.0 - tape.hidden**2)
    d_m1 = tape.pair_feats.T @ d_pre
    return {"m1": d_m1, "m2": d_m2}


# ---------------------------------------------------------------------------
# GCN forward / backward


@dataclass
class ForwardTape:
    """Cached intermediates of one GCN forward pass."""

    a_hat: object
    x: np.ndarray
    p1: np.ndarray
    q1: np.ndarray
    h1: np.ndarray
    p2: np.ndarray
    z: np.ndarray
    theta: GcnParams = field(repr=False, default=None)


def gcn_forward(theta, a_hat, x):
    """Two-layer GCN: Z = A_hat ReLU(A_hat X W1) W2, with tape."""
    p1 = a_hat.matmat(x)
    q1 = p1 @ theta.w1
    if not np.isfinite(q1).all():
        raise NumericError("non-finite pre-activation in layer 1")
    h1 = np.maximum(q1, 0.0)
    p2 = a_hat.matmat(h1)
    z = p2 @ theta.w2
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits in layer 2")
    tape = ForwardTape(a_hat=a_hat, x=x, p1=p1, q1=q1, h1=h1, p2=p2, z=z, theta=theta)
    return z, tape


def gcn_backward(tape, d_z):
    """Exact reverse pass from dLoss/dZ.

    Returns a dict with gradients for ``w1``, ``w2`` and ``gate`` — the
    latter being dLoss/d(gate_e) per canonical edge, where gate_e is the
    edge's multiplicative weight inside the pre-normalization adjacency.
    The degree normalization depends on the gates, so that path is included.
    """
    a_hat = tape.a_hat
    graph = a_hat.graph
    theta = tape.theta

    d_w2 = tape.p2.T @ d_z
    d_p2 = d_z @ theta.w2.T
    d_h1 = a_hat.matmat(d_p2)  # A_hat is symmetric
    d_q1 = d_h1 * (tape.q1 > 0)
    d_w1 = tape.p1.T @ d_q1
    d_p1 = d_q1 @ theta.w1.T

    # dLoss/dA_hat at the sparse positions (directed entries + diagonal)
    row, col = graph.row_idx, graph.col_idx
    g_entries = np.einsum("ec,ec->e", d_p2[row], tape.h1[col]) + np.einsum(
        "ec,ec->e", d_p1[row], tape.x[col]
    )
    g_diag = np.einsum("nc,nc->n", d_p2, tape.h1) + np.einsum(
        "nc,nc->n", d_p1, tape.x
    )

    deg = a_hat.deg
    inv_sqrt = 1.0 / np.sqrt(deg)

    # degree path: A_hat[r, c] = S[r, c] / sqrt(d_r d_c) depends on both degrees
    d_deg = -g_diag * a_hat.diag_vals / deg
    if g_entries.size:
        t = g_entries * a_hat.entry_vals
        np.add.at(d_deg, row, -0.5 * t / deg[row])
        np.add.at(d_deg, col, -0.5 * t / deg[col])

    d_gate = np.zeros(graph.num_edges)
    if g_entries.size:
        np.add.at(d_gate, graph.edge_of, g_entries * inv_sqrt[row] * inv_sqrt[col])
    if graph.num_edges:
        d_gate += d_deg[graph.edges[:, 0]] + d_deg[graph.edges[:, 1]]

    return {"w1": d_w1, "w2": d_w2, "gate": d_gate}


# ---------------------------------------------------------------------------
# losses


def softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(z, split, which):
    """Mean negative log-likelihood over the selected node set."""
    sel = split.mask(which)
    if not sel.any():
        raise ValueError("cross_entropy: empty node selection")
    logp = log_softmax(z[sel])
    labels = split.labels[sel]
    return float(-logp[np.arange(labels.size), labels].mean())


def cross_entropy_grad(z, split, which):
    """dLoss/dZ for :func:`cross_entropy` (zero on unselected rows)."""
    sel = split.mask(which)
    if not sel.any():
        raise ValueError("cross_entropy: empty node selection")
    labels = split.labels[sel]
    p = softmax(z[sel])
    p[np.arange(labels.size), labels] -= 1.0
    d_z = np.zeros_like(z)
    d_z[sel] = p / labels.size
    return d_z


def kl_output_divergence(z_anchor, z_current, node_mask=None, clamp=1e-12):
    """Mean KL(softmax(z_anchor) || softmax(z_current)) over nodes.

    The current distribution is clamped below at ``clamp`` so the value
    stays finite under extreme logit gaps.
    """
    if z_anchor.shape != z_current.shape:
        raise ValueError(f"logit shapes differ: {z_anchor.shape} vs {z_current.shape}")
    p = softmax(z_anchor)
    q = np.maximum(softmax(z_current), clamp)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, clamp)) - np.log(q)), 0.0)
    per_node = terms.sum(axis=1)
    if node_mask is not None:
        per_node = per_node[node_mask]
        if per_node.size == 0:
            raise ValueError("kl_output_divergence: empty node selection")
    return float(per_node.mean())


def kl_output_divergence_grad(z_anchor, z_current, node_mask=None):
    """dKL/dz_current: (q - p) / n over the selected rows, zero elsewhere."""
    p = softmax(z_anchor)
    q = softmax(z_current)
    d_z = q - p
    if node_mask is None:
        return d_z / z_current.shape[0]
    out = np.zeros_like(z_current)
    n_sel = int(np.asarray(node_mask).sum())
    if n_sel == 0:
        raise ValueError("kl_output_divergence: empty node selection")
    out[node_mask] = d_z[node_mask] / n_sel
    return out


def accuracy(z, split, which):
    sel = split.mask(which)
    if not sel.any():
        return float("nan")
    pred = z[sel].argmax(axis=1)
    return float((pred == split.labels[sel]).mean())


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_params(path, arrays):
    """Write named arrays as a JSON shape header + little-endian f64 blob."""
    header = {
        "arrays": [{"name": k, "shape": list(np.asarray(a).shape)} for k, a in arrays.items()]
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        out = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            out[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out
