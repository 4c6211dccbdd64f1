"""Extremal and full eigensolvers plus eigenvalue-variation edge scoring.

Everything here operates on the symmetric gated adjacency W = weights * mask
(no self-loops).  The dense solver is self-contained: Lanczos with full
reorthogonalization reduces W to tridiagonal form and an implicit-shift QL
iteration diagonalizes it, so no external LAPACK path is involved.  The
extremal solver reuses the same machinery on a CSR matvec and falls back to
the dense path for small operators.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .graph import adjacency_matvec, weighted_adjacency_dense

log = logging.getLogger(__name__)

EPS_LAMBDA = 1e-8
DENSE_GUARD = 2000
DENSE_FALLBACK = 256


class EigenSolverError(Exception):
    """Raised on invalid eigensolver input or failed convergence."""


@dataclass(frozen=True)
class EigenPairs:
    """Eigenvalues (ascending) with column-aligned unit eigenvectors."""

    values: np.ndarray
    vectors: np.ndarray
    which: str

    def max_residual(self, matvec):
        """Largest ||W v - lambda v||_2 over the stored pairs."""
        worst = 0.0
        for i, lam in enumerate(self.values):
            v = self.vectors[:, i]
            worst = max(worst, float(np.linalg.norm(matvec(v) - lam * v)))
        return worst


@dataclass(frozen=True)
class SpectralSummary:
    """The K algebraically largest and K smallest eigenpairs of an operator."""

    top: EigenPairs
    bottom: EigenPairs
    k: int

    @property
    def num_nodes(self):
        return self.bottom.vectors.shape[0]

    def stacked(self):
        """Concat-and-dedupe both ends into one (values, vectors) pair.

        Overlap can only occur when 2K >= N; duplicates are detected by the
        source indices recorded at construction time being the same sorted
        position, which reduces to dropping repeated (value, vector) columns
        coming from the same end-slice overlap.
        """
        vals = np.concatenate([self.bottom.values, self.top.values])
        vecs = np.concatenate([self.bottom.vectors, self.top.vectors], axis=1)
        if self.bottom.values.size and self.top.values.size:
            # bottom holds sorted positions [0, kb), top holds [n-kt, n); the
            # overlap is exactly the last max(0, kb+kt-n) bottom entries
            # repeated at the start of top.
            n = self.num_nodes
            overlap = max(0, self.bottom.values.size + self.top.values.size - n)
            if overlap:
                keep = np.concatenate(
                    [
                        np.arange(self.bottom.values.size),
                        self.bottom.values.size + np.arange(overlap, self.top.values.size),
                    ]
                )
                vals = vals[keep]
                vecs = vecs[:, keep]
        return vals, vecs


def _tql2(d, e, z, max_sweeps=50):
    """Implicit-shift QL iteration on a symmetric tridiagonal matrix.

    ``d`` holds the diagonal, ``e[i]`` the coupling between i and i+1
    (e[-1] ignored), ``z`` the basis to rotate (one column per tridiagonal
    coordinate).  Diagonalizes in place; eigenvalues land in ``d`` unsorted.
    """
    n = d.size
    if n == 0:
        return d, z
    eps = np.finfo(np.float64).eps
    e = e.copy()
    e[-1] = 0.0
    for l in range(n):
        iterations = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            iterations += 1
            if iterations > max_sweeps:
                raise EigenSolverError(
                    f"tridiagonal QL failed to converge at index {l} "
                    f"after {max_sweeps} sweeps"
                )
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            underflow = False
            for i in range(m - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                col = z[:, i + 1].copy()
                z[:, i + 1] = s * z[:, i] + c * col
                z[:, i] = c * z[:, i] - s * col
            if not underflow:
                d[l] -= p
                e[l] = g
                e[m] = 0.0
    return d, z


def _lanczos_tridiagonalize(matvec, n, steps, rng):
    """Run ``steps`` Lanczos iterations with twice-applied full reorthogonalization.

    Returns (alphas, betas, Q).  A breakdown (invariant subspace found) is
    handled by restarting with a fresh random direction orthogonal to the
    current basis, leaving a zero coupling in ``betas``.
    """
    q_basis = np.zeros((n, steps))
    alphas = np.zeros(steps)
    betas = np.zeros(max(steps - 1, 0))
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    q_basis[:, 0] = q
    scale = 0.0
    for j in range(steps):
        u = matvec(q_basis[:, j])
        alpha = float(q_basis[:, j] @ u)
        alphas[j] = alpha
        scale = max(scale, abs(alpha))
        if j == steps - 1:
            break
        r = u - alpha * q_basis[:, j]
        if j > 0:
            r -= betas[j - 1] * q_basis[:, j - 1]
        basis = q_basis[:, : j + 1]
        r -= basis @ (basis.T @ r)
        r -= basis @ (basis.T @ r)
        beta = float(np.linalg.norm(r))
        if beta <= 64 * n * np.finfo(np.float64).eps * max(scale, 1e-300):
            q = _random_orthogonal_direction(basis, n, rng)
            beta = 0.0
        else:
            q = r / beta
            scale = max(scale, beta)
        betas[j] = beta
        q_basis[:, j + 1] = q
    return alphas, betas, q_basis


def _random_orthogonal_direction(basis, n, rng, tries=8):
    for _ in range(tries):
        v = rng.standard_normal(n)
        v -= basis @ (basis.T @ v)
        v -= basis @ (basis.T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            return v / norm
    raise EigenSolverError("could not restart Lanczos: basis spans the full space")


def _check_symmetric(w):
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise EigenSolverError(f"expected a square matrix, got shape {w.shape}")
    if w.size and np.abs(w - w.T).max() > 1e-10:
        raise EigenSolverError("input matrix is not symmetric within 1e-10")


def dense_eig_oracle(w, seed=0):
    """Full spectrum of a small symmetric matrix, eigenvalues ascending.

    Self-contained reduction-to-tridiagonal + QL; guarded to N <= 2000.  The
    seed fixes the Lanczos start vector so identical inputs give bit-identical
    output.
    """
    w = np.asarray(w, dtype=np.float64)
    _check_symmetric(w)
    n = w.shape[0]
    if n > DENSE_GUARD:
        raise EigenSolverError(f"dense solver guarded to N <= {DENSE_GUARD}, got {n}")
    if n == 0:
        return EigenPairs(np.zeros(0), np.zeros((0, 0)), which="full")
    ws = 0.5 * (w + w.T)
    rng = np.random.default_rng(seed)
    alphas, betas, q_basis = _lanczos_tridiagonalize(lambda x: ws @ x, n, n, rng)
    e = np.zeros(n)
    e[: n - 1] = betas
    d, z = _tql2(alphas.copy(), e, np.eye(n))
    vectors = q_basis @ z
    order = np.argsort(d, kind="stable")
    values = d[order]
    vectors = vectors[:, order]
    vectors /= np.linalg.norm(vectors, axis=0, keepdims=True)
    return EigenPairs(values=values, vectors=vectors, which="full")


def _summary_from_full(pairs, k):
    n = pairs.values.size
    kk = min(k, n)
    bottom = EigenPairs(
        values=pairs.values[:kk], vectors=pairs.vectors[:, :kk], which="bottom-k"
    )
    top = EigenPairs(
        values=pairs.values[n - kk :], vectors=pairs.vectors[:, n - kk :], which="top-k"
    )
    return SpectralSummary(top=top, bottom=bottom, k=kk)


def extremal_eig(
    graph,
    weights,
    k,
    mask=None,
    tol=1e-8,
    max_iter=None,
    dense_threshold=DENSE_FALLBACK,
    seed=0,
):
    """K largest and K smallest algebraic eigenpairs of W = weights * mask.

    Small operators (N <= ``dense_threshold``) go through the dense oracle;
    larger ones run Lanczos on the CSR matvec with full reorthogonalization,
    verifying every returned pair against ``||Wv - lambda v|| <= tol * ||W||``.
    Raises :class:`EigenSolverError` with the achieved residuals when the
    iteration budget runs out.
    """
    n = graph.num_nodes
    if k < 1:
        raise ValueError("k must be at least 1")
    gated = np.asarray(weights, dtype=np.float64)
    if mask is not None:
        gated = gated * np.asarray(mask, dtype=np.float64)

    if n <= dense_threshold or 2 * k > n:
        pairs = dense_eig_oracle(weighted_adjacency_dense(graph, gated), seed=seed)
        return _summary_from_full(pairs, k)

    matvec = lambda x: adjacency_matvec(graph, gated, x)
    if max_iter is None:
        max_iter = n
    max_iter = min(max_iter, n)
    rng = np.random.default_rng(seed)
    q_basis = np.zeros((n, max_iter))
    alphas = np.zeros(max_iter)
    betas = np.zeros(max_iter)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    q_basis[:, 0] = q
    scale = 1e-300

    steps = 0
    for j in range(max_iter):
        u = matvec(q_basis[:, j])
        alphas[j] = float(q_basis[:, j] @ u)
        scale = max(scale, abs(alphas[j]))
        steps = j + 1
        if j == max_iter - 1 or steps == n:
            break
        r = u - alphas[j] * q_basis[:, j]
        if j > 0:
            r -= betas[j - 1] * q_basis[:, j - 1]
        basis = q_basis[:, : j + 1]
        r -= basis @ (basis.T @ r)
        r -= basis @ (basis.T @ r)
        beta = float(np.linalg.norm(r))
        if beta <= 64 * n * np.finfo(np.float64).eps * scale:
            q_basis[:, j + 1] = _random_orthogonal_direction(basis, n, rng)
            betas[j] = 0.0
        else:
            q_basis[:, j + 1] = r / beta
            betas[j] = beta
            scale = max(scale, beta)
        # check Ritz convergence once the subspace can hold both ends
        if steps >= 2 * k + 2 and (steps % 5 == 0 or steps == max_iter - 1):
            if _ritz_converged(alphas, betas, steps, k, tol, scale):
                break

    d, z = _tql2(
        alphas[:steps].copy(),
        np.append(betas[: steps - 1], 0.0),
        np.eye(steps),
    )
    order = np.argsort(d, kind="stable")
    ritz_vals = d[order]
    ritz_vecs = q_basis[:, :steps] @ z[:, order]
    idx = np.concatenate([np.arange(k), np.arange(steps - k, steps)])
    vectors = ritz_vecs[:, idx]
    vectors /= np.linalg.norm(vectors, axis=0, keepdims=True)
    values = ritz_vals[idx]

    residuals = np.array(
        [np.linalg.norm(matvec(vectors[:, i]) - values[i] * vectors[:, i]) for i in range(values.size)]
    )
    if steps < n and residuals.max() > tol * scale:
        raise EigenSolverError(
            f"Lanczos did not converge in {steps} iterations; "
            f"achieved residuals {residuals.max():.3e} > {tol * scale:.3e}"
        )
    bottom = EigenPairs(values[:k], vectors[:, :k], which="bottom-k")
    top = EigenPairs(values[k:], vectors[:, k:], which="top-k")
    return SpectralSummary(top=top, bottom=bottom, k=k)


def _ritz_converged(alphas, betas, steps, k, tol, scale):
    d, z = _tql2(
        alphas[:steps].copy(),
        np.append(betas[: steps - 1], 0.0),
        np.eye(steps),
    )
    order = np.argsort(d, kind="stable")
    z = z[:, order]
    beta_last = betas[steps - 1] if steps - 1 < betas.size else 0.0
    idx = np.concatenate([np.arange(k), np.arange(steps - k, steps)])
    bounds = np.abs(beta_last * z[steps - 1, idx])
    return bool(bounds.max() <= 0.1 * tol * scale)


def first_order_edge_deltas(graph, weights, pairs, edge_id):
    """Predicted eigenvalue shifts from fully removing one edge.

    For each eigenpair (lambda_k, v_k) of the symmetric gated adjacency, the
    first-order shift of zeroing edge (u, v) with weight w is
    ``-2 w v_k[u] v_k[v]`` (both symmetric entries perturb together).
    """
    u, v = graph.edges[edge_id]
    w = float(np.asarray(weights)[edge_id])
    vecs = pairs.vectors if isinstance(pairs, EigenPairs) else pairs[1]
    return -2.0 * w * vecs[u, :] * vecs[v, :]


def eigen_variation_scores(anchor_weights, graph, summary, eps_lambda=EPS_LAMBDA):
    """Per-edge spectral-impact scores from the anchor spectrum.

    Each canonical edge (u, v) gets
    ``sum_k |2 w_e v_k[u] v_k[v]| / max(|lambda_k|, eps_lambda)`` over the
    top-K and bottom-K anchor eigenpairs: the first-order relative eigenvalue
    variation caused by deleting that edge.  Always nonnegative.
    """
    if eps_lambda <= 0:
        raise ValueError("eps_lambda must be positive")
    if summary.num_nodes != graph.num_nodes:
        raise ValueError(
            f"spectrum over {summary.num_nodes} nodes does not match graph "
            f"with {graph.num_nodes} nodes"
        )
    w = np.asarray(anchor_weights, dtype=np.float64)
    if graph.num_edges == 0:
        return np.zeros(0)
    vals, vecs = summary.stacked()
    u = graph.edges[:, 0]
    v = graph.edges[:, 1]
    prod = vecs[u, :] * vecs[v, :]
    denom = np.maximum(np.abs(vals), eps_lambda)
    return np.abs(2.0 * w[:, None] * prod).dot(1.0 / denom)


def exact_variation_oracle(weights, graph, edge_id, k, eps_lambda=EPS_LAMBDA):
    """Eigenvalue variation of removing one edge, by full recomputation.

    Recomputes the whole spectrum with the edge zeroed and sums the relative
    changes over the K lowest and K highest positions of the original
    spectrum.  Dense-solver cost; intended as a test oracle.
    """
    w = np.asarray(weights, dtype=np.float64)
    base = weighted_adjacency_dense(graph, w)
    u, v = graph.edges[edge_id]
    perturbed = base.copy()
    perturbed[u, v] = 0.0
    perturbed[v, u] = 0.0
    vals0 = dense_eig_oracle(base).values
    vals1 = dense_eig_oracle(perturbed).values
    n = vals0.size
    kk = min(k, n)
    idx = np.unique(np.concatenate([np.arange(kk), np.arange(n - kk, n)]))
    denom = np.maximum(np.abs(vals0[idx]), eps_lambda)
    return float(np.sum(np.abs(vals0[idx] - vals1[idx]) / denom))


@dataclass(frozen=True)
class PreservationReport:
    """Spectral preservation ratio plus the per-eigenvalue breakdown."""

    ratio: float
    relative_errors: np.ndarray
    values_full: np.ndarray
    values_sparse: np.ndarray
    clamped: int
    k: int
    matrix_kind: str

    def __float__(self):
        return self.ratio


def _spectrum_matrix(graph, weights, mask, matrix_kind):
    w = weighted_adjacency_dense(graph, weights, mask)
    if matrix_kind == "adjacency":
        return w
    if matrix_kind == "laplacian":
        return np.diag(w.sum(axis=1)) - w
    raise ValueError(f"matrix_kind must be 'adjacency' or 'laplacian', got {matrix_kind!r}")


def spectral_preservation(
    graph,
    full_weights,
    full_mask,
    sparse_weights,
    sparse_mask,
    k=None,
    matrix_kind="laplacian",
    eps_lambda=EPS_LAMBDA,
):
    """Summed relative error of the K largest-magnitude eigenvalues.

    Both spectra are sorted by magnitude (descending) and paired by position;
    entries whose reference eigenvalue is below ``eps_lambda`` in magnitude
    use the clamped denominator and are counted in ``clamped``.
    """
    n = graph.num_nodes
    if k is None:
        k = min(200, n)
    if k > n:
        log.warning("preservation ratio: k=%d clamped to N=%d", k, n)
        k = n
    full = dense_eig_oracle(_spectrum_matrix(graph, full_weights, full_mask, matrix_kind))
    sparse = dense_eig_oracle(
        _spectrum_matrix(graph, sparse_weights, sparse_mask, matrix_kind)
    )
    by_mag_full = full.values[np.argsort(-np.abs(full.values), kind="stable")][:k]
    by_mag_sparse = sparse.values[np.argsort(-np.abs(sparse.values), kind="stable")][:k]
    denom = np.maximum(np.abs(by_mag_full), eps_lambda)
    errors = np.abs(by_mag_full - by_mag_sparse) / denom
    clamped = int((np.abs(by_mag_full) < eps_lambda).sum())
    return PreservationReport(
        ratio=float(errors.sum()),
        relative_errors=errors,
        values_full=by_mag_full,
        values_sparse=by_mag_sparse,
        clamped=clamped,
        k=k,
        matrix_kind=matrix_kind,
    )
