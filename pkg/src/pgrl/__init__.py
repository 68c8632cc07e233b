"""Desk-scale robust-learning lab.

Backdoor-poisoned dataset construction, prototype-guided training defenses
(balanced-assignment pseudo-labeling, label-consistency verification,
feature-distance trust weights, signed weighted cross-entropy), baselines,
diagnostics, and a seeded experiment harness -- all on small synthetic tasks.
"""

__version__ = "0.1.0"

from .data import (
    Dataset,
    AttackSpec,
    gen_synthetic,
    split_train_val_test,
    apply_pattern_attack,
    apply_adapblend_attack,
    apply_freq_attack,
    augment,
    augment_batch,
    save_dataset,
    load_dataset,
    trigger_for_attack,
)
from .nn import Model, ModelConfig, Adam, cosine_lr, wce_loss, ce_loss
from .transport import (
    build_prototypes,
    sinkhorn_assign,
    sinkhorn_from_scores,
    pseudo_label,
    lcv_split,
    naive_cosine_label,
    ConsistencySplit,
)
from .weighting import (
    ReducedFeatureSpace,
    WeightState,
    fit_reduction,
    score_samples,
    choose_tau,
    normalize_weights,
    update_weights,
    detect_poison,
    estimate_raw_weights,
)
from .training import TrainConfig, TrainReport, train, fpf_isolation_baseline, warm_loss_profile
from .metrics import compute_acc_asr, compute_tpr_fpr, auc10, feature_consistency
from .errors import ConfigError, SpecError
