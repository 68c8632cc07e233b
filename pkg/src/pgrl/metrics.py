"""Evaluation metrics: accuracy, attack success rate, detection rates,
loss-separability AUC, feature consistency."""

from __future__ import annotations

import numpy as np

from .data import Dataset, FLAG_BENIGN, FLAG_COVER, FLAG_POISONED


def compute_acc_asr(model, test: Dataset, trigger_fn, target: int | None):
    """Clean accuracy and attack success rate on a held-out test set.

    ASR counts only non-target-class inputs: a triggered target-class sample
    predicted as the target is not an attack success.
    """
    if test.n == 0:
        raise ValueError("empty test set")
    pred = model.predict(test.x)
    acc = float((pred == test.y).mean())
    if trigger_fn is None or target is None:
        return acc, None
    keep = test.y != target
    if not np.any(keep):
        return acc, None
    pred_t = model.predict(trigger_fn(test.x[keep]))
    asr = float((pred_t == target).mean())
    return acc, asr


def compute_tpr_fpr(suspects, flags, cover_as_poisoned: bool = True):
    """Exact detection rates against ground-truth provenance flags.

    Returns (tpr, fpr) with tpr None when there are no positives. Cover
    samples count as poisoned by default; pass cover_as_poisoned=False for
    the other convention.
    """
    suspects = np.asarray(suspects, dtype=bool)
    flags = np.asarray(flags)
    if suspects.shape != flags.shape:
        raise ValueError("suspects and flags must have equal length")
    if cover_as_poisoned:
        positive = (flags == FLAG_POISONED) | (flags == FLAG_COVER)
    else:
        # covers are neither positives nor counted against FPR in this view
        positive = flags == FLAG_POISONED
    negative = flags == FLAG_BENIGN
    n_pos = int(positive.sum())
    n_neg = int(negative.sum())
    tpr = float((suspects & positive).sum() / n_pos) if n_pos else None
    fpr = float((suspects & negative).sum() / n_neg) if n_neg else 0.0
    return tpr, fpr


def auc10(losses, poisoned_mask) -> float:
    """Area under the ROC separating poisoned from benign samples by loss.

    Positive prediction means loss below the threshold (low loss = fitted
    early = suspected poison); the threshold sweeps every distinct loss value
    and the area integrates TPR over FPR, so tied losses contribute 0.5.
    """
    losses = np.asarray(losses, dtype=np.float64)
    poisoned = np.asarray(poisoned_mask, dtype=bool)
    if losses.shape != poisoned.shape:
        raise ValueError("losses and mask must have equal length")
    n_pos = int(poisoned.sum())
    n_neg = int((~poisoned).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one poisoned and one benign sample")
    order = np.argsort(losses, kind="stable")
    sorted_losses = losses[order]
    sorted_pos = poisoned[order]
    # group ties: cumulative counts at each distinct loss value
    boundaries = np.flatnonzero(np.diff(sorted_losses)) + 1
    ends = np.concatenate([boundaries, [len(losses)]])
    tp = np.cumsum(sorted_pos)[ends - 1] / n_pos
    fp = np.cumsum(~sorted_pos)[ends - 1] / n_neg
    tpr = np.concatenate([[0.0], tp])
    fpr = np.concatenate([[0.0], fp])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def feature_consistency(model, x, augmenter) -> float:
    """Squared L2 distance between features of x and of one augmentation of x."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    f_orig = model.forward(batch)[0]
    f_aug = model.forward(np.asarray(augmenter(batch), dtype=np.float64))[0]
    d2 = ((f_orig - f_aug) ** 2).sum(axis=1)
    return float(d2[0]) if single else d2
