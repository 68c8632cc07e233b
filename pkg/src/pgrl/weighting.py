"""Per-sample trust weights from feature-space distance to validation samples.

Features are reduced with PCA (deterministic stand-in for a nonlinear
reducer; what matters is that near/far distances stay meaningful at low
dimension), scored against the validation features of the sample's own label
with an isotropic normal density, and normalized into [-1, 1] with a
threshold picked from the empirical score distribution:

    w_i = 1                                   if q_i > tau
    w_i = 2 (q_i - min q) / (tau - min q) - 1 if q_i <= tau

so the top keep_fraction of samples get weight 1 and the rest scale down to
-1. Weights are smoothed across estimation rounds by momentum.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class ReducedFeatureSpace:
    mean: np.ndarray  # (d1,)
    basis: np.ndarray  # (d1, d') with orthonormal columns
    singular_values: np.ndarray
    explained_variance_ratio: float

    def transform(self, X):
        return (np.asarray(X) - self.mean) @ self.basis


def fit_reduction(features, target_dim: int) -> ReducedFeatureSpace:
    """Top principal components of the centered feature matrix."""
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    if n <= target_dim:
        raise ValueError(f"need more than target_dim={target_dim} samples, got {n}")
    if target_dim < 1 or target_dim > d:
        raise ValueError(f"target_dim must be in [1, {d}], got {target_dim}")
    mean = X.mean(axis=0)
    _, svals, vt = np.linalg.svd(X - mean, full_matrices=True)
    svals = np.concatenate([svals, np.zeros(max(0, d - len(svals)))])
    rank = int((svals > svals[0] * 1e-12).sum()) if svals[0] > 0 else 0
    if rank < target_dim:
        warnings.warn(f"feature matrix rank {rank} < target_dim {target_dim}; "
                      "padding with an orthonormal complement")
    basis = vt[:target_dim].T
    # canonical sign: largest-magnitude entry of each component is positive
    flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(target_dim)])
    flip[flip == 0] = 1.0
    basis = basis * flip
    total = float((svals**2).sum())
    evr = float((svals[:target_dim] ** 2).sum() / total) if total > 0 else 1.0
    return ReducedFeatureSpace(mean=mean, basis=basis,
                               singular_values=svals[:target_dim].copy(),
                               explained_variance_ratio=evr)


def score_samples(train_red, y, val_red, y_val, k: int) -> np.ndarray:
    """q_i = max over same-label validation features of N(f_i | mu, I).

    Computed in log space and exponentiated at the end. Densities use the
    reduced dimension, so a zero-distance sample scores (2*pi)^(-d'/2).
    """
    train_red = np.asarray(train_red, dtype=np.float64)
    y = np.asarray(y)
    val_red = np.asarray(val_red, dtype=np.float64)
    y_val = np.asarray(y_val)
    d = train_red.shape[1]
    log_norm = -0.5 * d * math.log(2.0 * math.pi)
    log_q = np.empty(len(y))
    for j in range(k):
        mus = val_red[y_val == j]
        rows = np.flatnonzero(y == j)
        if mus.shape[0] == 0:
            if rows.size:
                raise ValueError(f"no validation features for class {j}")
            continue
        if rows.size == 0:
            continue
        diff = train_red[rows][:, None, :] - mus[None, :, :]
        d2 = (diff * diff).sum(axis=2).min(axis=1)
        log_q[rows] = log_norm - 0.5 * d2
    return np.exp(log_q)


def choose_tau(q, keep_fraction: float) -> float:
    """Empirical threshold so that about keep_fraction of the scores lie above."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0,1], got {keep_fraction}")
    q = np.sort(np.asarray(q, dtype=np.float64))
    n = len(q)
    m = n - int(round(keep_fraction * n)) - 1
    if m < 0:
        return float(q[0])  # degenerate: everything kept (normalize warns)
    return float(q[m])


def normalize_weights(q, tau: float) -> np.ndarray:
    """Threshold normalization of raw scores into [-1, 1]."""
    q = np.asarray(q, dtype=np.float64)
    qmin = q.min()
    if tau <= qmin:
        warnings.warn("tau <= min(q): degenerate threshold, keeping all weights at 1")
        return np.ones_like(q)
    w = np.where(q > tau, 1.0, 2.0 * (q - qmin) / (tau - qmin) - 1.0)
    return w


@dataclass
class WeightState:
    w_star: np.ndarray  # momentum-smoothed weights in [-1, 1]
    lam: float  # momentum coefficient
    reduced_dim: int
    tau: float | None = None
    w_raw: np.ndarray | None = None
    q: np.ndarray | None = None
    rounds: int = 0

    @classmethod
    def initial(cls, n: int, lam: float, reduced_dim: int) -> "WeightState":
        return cls(w_star=np.ones(n), lam=lam, reduced_dim=reduced_dim)


def update_weights(state: WeightState, w_raw) -> WeightState:
    """Momentum update: w* <- lam * w_raw + (1 - lam) * w*."""
    w_raw = np.asarray(w_raw, dtype=np.float64)
    if w_raw.shape != state.w_star.shape:
        raise ValueError("w_raw length must match the tracked sample count")
    state.w_raw = w_raw
    state.w_star = state.lam * w_raw + (1.0 - state.lam) * state.w_star
    state.rounds += 1
    return state


def detect_poison(state: WeightState, threshold: float = 0.0) -> np.ndarray:
    """Suspect mask: smoothed weight strictly below the threshold."""
    return state.w_star < threshold


def estimate_raw_weights(train_features, y, val_features, y_val, k: int,
                         reduced_dim: int, keep_fraction: float):
    """Full estimation round on raw (unreduced) features.

    Returns (q, tau, w_raw, space). The reduction is fit on the training
    features only; validation features are projected with the same basis.
    """
    space = fit_reduction(train_features, reduced_dim)
    q = score_samples(space.transform(train_features), y,
                      space.transform(val_features), y_val, k)
    tau = choose_tau(q, keep_fraction)
    w_raw = normalize_weights(q, tau)
    return q, tau, w_raw, space


def append_weight_round(path, round_no: int, q, w_raw, w_star, flags):
    """Append one estimation round to a CSV for offline analysis."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["round", "index", "q", "w_raw", "w_star", "flag"])
        for i in range(len(q)):
            writer.writerow([round_no, i, repr(float(q[i])), repr(float(w_raw[i])),
                             repr(float(w_star[i])), int(flags[i])])
