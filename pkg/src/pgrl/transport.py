"""Class prototypes, balanced-assignment pseudo-labels, label-consistency split.

Pseudo-labels come from an entropy-regularized balanced assignment between
batch sphere vectors and class prototypes:

    maximize  <Q, S C^T> + epsilon * H(Q)
    over      Q >= 0,  Q 1_k = 1_n,  Q^T 1_n = (n/k) 1_k

solved by log-domain Sinkhorn-Knopp scaling of exp(S C^T / epsilon). The
column constraint forces every class to receive n/k mass, which prevents the
all-samples-to-one-prototype collapse of plain nearest-prototype labeling
(kept here as `naive_cosine_label` for the ablation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset

# Convergence is linear for generic scores but only O(1/iter) when the
# underlying assignment problem has ties, hence the large iteration budget;
# tol is the max absolute column-sum violation.
SINKHORN_MAX_ITERS = 30000
SINKHORN_TOL = 1e-6


def build_prototypes(model, val: Dataset) -> np.ndarray:
    """k x d2 matrix: normalized mean sphere vector per validation class."""
    sphere = model.forward(val.x)[1]
    protos = np.empty((val.k, sphere.shape[1]))
    for j in range(val.k):
        rows = sphere[val.y == j]
        if rows.shape[0] == 0:
            raise ValueError(f"validation set has no samples of class {j}")
        m = rows.mean(axis=0)
        protos[j] = m / np.linalg.norm(m)
    return protos


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def _sinkhorn_core(scores, epsilon, max_iters, tol, col_marginals):
    """Shared solver on a (V, n, k) stack of score matrices."""
    V, n, k = scores.shape
    logK = scores / epsilon
    if col_marginals is None:
        col = np.full(k, n / k)
    else:
        col = np.asarray(col_marginals, dtype=np.float64)
        if col.shape != (k,) or np.any(col <= 0):
            raise ValueError("col_marginals must be k positive values")
        if abs(col.sum() - n) > 1e-6 * n:
            raise ValueError(f"col_marginals must sum to n={n}, got {col.sum()}")
    log_col = np.log(col)
    log_u = np.zeros((V, n, 1))
    log_v = np.zeros((V, 1, k))
    err = np.inf
    for it in range(1, max_iters + 1):
        # rows of the current iterate are exact; its column sums come free
        # from the logsumexp that the v-update needs anyway
        lse_col = _logsumexp(logK + log_u, axis=1)
        err = np.abs(np.exp(lse_col + log_v) - col).max()
        if err <= tol:
            return np.exp(logK + log_u + log_v), it - 1, float(err)
        log_v = log_col[None, None, :] - lse_col
        log_u = -_logsumexp(logK + log_v, axis=2)  # row targets are all ones
    Q = np.exp(logK + log_u + log_v)
    err = float(np.abs(Q.sum(axis=1) - col).max())
    if err > tol:
        warnings.warn(f"sinkhorn did not converge in {max_iters} iterations "
                      f"(column residual {err:.3e} > tol {tol:.1e})")
    return Q, max_iters, err


def sinkhorn_from_scores(scores, epsilon: float = 0.05,
                         max_iters: int = SINKHORN_MAX_ITERS,
                         tol: float = SINKHORN_TOL,
                         col_marginals=None) -> np.ndarray:
    """Balanced assignment matrix for an n x k score matrix.

    Rows of the result sum to 1; columns sum to n/k (or `col_marginals`)
    within `tol` after convergence. Non-convergence warns and returns the
    last iterate.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"expected an (n, k) score matrix, got shape {scores.shape}")
    Q, _, _ = _sinkhorn_core(scores[None], epsilon, max_iters, tol, col_marginals)
    return Q[0]


def sinkhorn_many(score_stack, epsilon: float = 0.05,
                  max_iters: int = SINKHORN_MAX_ITERS,
                  tol: float = SINKHORN_TOL, warn: bool = True) -> np.ndarray:
    """Solve a (V, n, k) stack of score matrices jointly (one per view)."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    stack = np.asarray(score_stack, dtype=np.float64)
    if warn:
        Q, _, _ = _sinkhorn_core(stack, epsilon, max_iters, tol, None)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            Q, _, _ = _sinkhorn_core(stack, epsilon, max_iters, tol, None)
    return Q


def _check_unit_rows(S, what):
    norms = np.linalg.norm(S, axis=1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError(f"{what} rows must be unit-norm")


def sinkhorn_assign(sphere, prototypes, epsilon: float = 0.05,
                    max_iters: int = SINKHORN_MAX_ITERS,
                    tol: float = SINKHORN_TOL,
                    col_marginals=None) -> np.ndarray:
    """Assignment matrix between batch sphere vectors and class prototypes."""
    sphere = np.asarray(sphere, dtype=np.float64)
    _check_unit_rows(sphere, "sphere")
    return sinkhorn_from_scores(sphere @ np.asarray(prototypes).T, epsilon,
                                max_iters, tol, col_marginals)


def pseudo_label(Q=None, votes=None) -> np.ndarray:
    """Per-sample pseudo-labels.

    Without `votes`: argmax over the rows of Q. With `votes` (a sequence of
    per-view assignment or score matrices): majority class over the per-view
    argmaxes, ties broken by the lowest class index.
    """
    if votes is not None:
        stack = [np.asarray(v).argmax(axis=1) for v in votes]
        n = len(stack[0])
        k = votes[0].shape[1]
        counts = np.zeros((n, k), dtype=np.int64)
        rows = np.arange(n)
        for v in stack:
            np.add.at(counts, (rows, v), 1)
        return counts.argmax(axis=1)
    return np.asarray(Q).argmax(axis=1)


@dataclass
class ConsistencySplit:
    trusted: np.ndarray  # indices with pseudo == dataset label
    untrusted: np.ndarray
    pseudo: np.ndarray


def lcv_split(pseudo, y) -> ConsistencySplit:
    """Trust a sample iff its pseudo-label matches its dataset label."""
    pseudo = np.asarray(pseudo)
    y = np.asarray(y)
    if pseudo.shape != y.shape:
        raise ValueError("pseudo-labels and labels must have equal length")
    agree = pseudo == y
    return ConsistencySplit(trusted=np.flatnonzero(agree),
                            untrusted=np.flatnonzero(~agree),
                            pseudo=pseudo)


def naive_cosine_label(sphere, prototypes) -> np.ndarray:
    """Nearest-prototype labels (the balanced-assignment-free baseline)."""
    sphere = np.asarray(sphere, dtype=np.float64)
    _check_unit_rows(sphere, "sphere")
    return (sphere @ np.asarray(prototypes).T).argmax(axis=1)
