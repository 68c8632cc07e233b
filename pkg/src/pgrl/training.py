"""Training modes: prototype-guided robust learning and its baselines.

The guided loop (modes pgrl / lcv_only / wce_only) follows one code path so
that disabling a component reproduces the corresponding ablation bit-for-bit:

  warm-up on the validation set only, then per batch:
    augmented views -> balanced-assignment pseudo-labels -> majority vote
    -> trust samples whose vote matches their dataset label (lcv)
    -> signed weighted CE over all views of the trusted samples (wce)
  and, every weight_every epochs, a full-dataset weight estimation round
  folded in by momentum.

`naive` is plain CE over everything (no warm-up, no views), and
`fpf_isolation` is the lowest-loss-quantile isolation baseline built on a
short plain warm training.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import Dataset, FLAG_POISONED, augment_batch, trigger_for_attack
from .errors import ConfigError
from .metrics import compute_acc_asr
from .nn import Adam, Model, ModelConfig, ce_per_sample, wce_value_grad
from .seeding import stream
from .transport import build_prototypes, lcv_split, pseudo_label, sinkhorn_many
from .weighting import (WeightState, append_weight_round, detect_poison,
                        estimate_raw_weights, update_weights)

logger = logging.getLogger(__name__)

MODES = ("pgrl", "lcv_only", "wce_only", "naive", "fpf_isolation")


@dataclass
class TrainConfig:
    mode: str = "pgrl"
    epochs: int = 55
    warmup_epochs: int = 5
    batch_size: int = 64
    epsilon: float = 0.05  # assignment entropy regularizer
    lam: float = 0.5  # weight momentum
    keep_fraction: float = 0.9
    n_aug: int = 6
    reduced_dim: int = 10
    weight_every: int = 5  # estimation period in epochs; <= 0 disables
    seed: int = 0
    use_ot: bool = True  # False: nearest-prototype pseudo-labels (ablation)
    lr_start: float = 0.01
    lr_end: float = 0.0001
    d1: int = 32
    d2: int = 16
    f_hidden: int = 64
    s_hidden: int = 32
    fpf_isolate_fraction: float = 0.05
    fpf_warm_epochs: int = 10
    checkpoint_every: int = 0  # epochs; <= 0 disables
    aug_sigma: float = 0.05
    aug_jitter_pairs: int = 2
    aug_scale_low: float = 0.9
    aug_scale_high: float = 1.1
    # batch pseudo-labeling only needs argmax-stable assignments; clustered
    # sphere geometry mid-training makes exact balancing O(1/iter)-slow
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-3

    def validate(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if not self.warmup_epochs < self.epochs:
            problems.append(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.n_aug < 1:
            problems.append(f"n_aug must be >= 1, got {self.n_aug}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epsilon <= 0:
            problems.append(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.keep_fraction <= 1.0:
            problems.append(f"keep_fraction must be in [0,1], got {self.keep_fraction}")
        if not 0.0 <= self.lam <= 1.0:
            problems.append(f"lambda must be in [0,1], got {self.lam}")
        if not 1 <= self.reduced_dim <= self.d1:
            problems.append(f"reduced_dim must be in [1, d1={self.d1}], got {self.reduced_dim}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    trusted_frac: float
    acc: float | None = None
    asr: float | None = None
    trusted_class_counts: list = field(default_factory=list)
    benign_loss_q: list = field(default_factory=list)  # min, q25, med, q75, max
    poisoned_loss_q: list | None = None
    weights_updated: bool = False


@dataclass
class TrainReport:
    mode: str
    config: dict
    per_epoch: list
    wall_time: float
    final_acc: float | None
    final_asr: float | None
    model: Model | None = None
    weight_state: WeightState | None = None
    suspects: np.ndarray | None = None
    per_sample_losses: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        """JSON-safe view (arrays summarized, model/weights left to checkpoints)."""
        return {
            "mode": self.mode,
            "config": self.config,
            "wall_time": self.wall_time,
            "final_acc": self.final_acc,
            "final_asr": self.final_asr,
            "suspect_count": int(self.suspects.sum()) if self.suspects is not None else None,
            "per_epoch": [asdict(e) for e in self.per_epoch],
        }


def _model_config(cfg: TrainConfig, in_dim: int, k: int) -> ModelConfig:
    return ModelConfig(in_dim=in_dim, k=k, d1=cfg.d1, d2=cfg.d2,
                       f_hidden=cfg.f_hidden, s_hidden=cfg.s_hidden)


def _loss_quantiles(losses, mask):
    vals = losses[mask]
    if vals.size == 0:
        return None
    return [float(v) for v in np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])]


def _epoch_eval(model, train_ds, test_ds, trigger, target):
    acc = asr = None
    if test_ds is not None:
        acc, asr = compute_acc_asr(model, test_ds, trigger, target)
    losses = ce_per_sample(model, train_ds.x, train_ds.y)
    ben_q = _loss_quantiles(losses, train_ds.flags != FLAG_POISONED)
    poi_q = _loss_quantiles(losses, train_ds.flags == FLAG_POISONED)
    return acc, asr, ben_q, poi_q, losses


def _plain_epoch(model, opt, ds, order, batch_size):
    """One epoch of sum-reduced CE over everything; returns mean loss/sample."""
    total = 0.0
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        xb, yb = ds.x[idx], ds.y[idx]
        model.forward(xb)
        loss, dlogits = wce_value_grad(model.last_logits, yb,
                                       np.ones(len(idx)), np.arange(len(idx)))
        model.backward(dlogits)
        opt.step(model)
        total += loss
    return total / len(order)


def train(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset | None = None,
          test_ds: Dataset | None = None, weights_csv=None,
          checkpoint_path=None) -> TrainReport:
    """Train under the configured mode; see the module docstring for semantics."""
    cfg.validate()
    if cfg.mode == "fpf_isolation":
        return fpf_isolation_baseline(cfg, train_ds, test_ds=test_ds)
    if cfg.mode == "naive":
        return _train_plain(cfg, train_ds, test_ds, checkpoint_path=checkpoint_path)
    if val_ds is None:
        raise ConfigError(f"mode {cfg.mode!r} needs a validation set")
    if val_ds.k != train_ds.k:
        raise ConfigError("validation set and training set disagree on class count")
    return _train_guided(cfg, train_ds, val_ds, test_ds, weights_csv, checkpoint_path)


def _maybe_checkpoint(cfg, checkpoint_path, model, opt, w_state, e, last_epoch):
    """Epoch-stamped snapshot at each configured epoch, plain file at the end."""
    if checkpoint_path is None:
        return
    if cfg.checkpoint_every > 0 and e % cfg.checkpoint_every == 0:
        p = Path(checkpoint_path)
        save_checkpoint(p.with_name(f"{p.stem}_e{e}{p.suffix}"), model, opt, w_state, cfg, e)
    if e == last_epoch:
        save_checkpoint(checkpoint_path, model, opt, w_state, cfg, e)


def _train_plain(cfg: TrainConfig, ds: Dataset, test_ds, epochs=None,
                 checkpoint_path=None) -> TrainReport:
    t0 = time.time()
    epochs = cfg.epochs if epochs is None else epochs
    model = Model(_model_config(cfg, ds.in_dim, ds.k), seed=cfg.seed)
    opt = Adam(model, cfg.lr_start, cfg.lr_end, epochs)
    trigger = trigger_for_attack(ds.attack, ds.in_dim)
    target = ds.attack.target if ds.attack else None
    history = []
    losses = None
    for e in range(1, epochs + 1):
        opt.set_epoch(e - 1)
        order = stream(cfg.seed, "order", e).permutation(ds.n)
        mean_loss = _plain_epoch(model, opt, ds, order, cfg.batch_size)
        acc, asr, ben_q, poi_q, losses = _epoch_eval(model, ds, test_ds, trigger, target)
        history.append(EpochStats(epoch=e, lr=opt.lr, mean_loss=mean_loss,
                                  trusted_frac=1.0, acc=acc, asr=asr,
                                  trusted_class_counts=[],
                                  benign_loss_q=ben_q, poisoned_loss_q=poi_q))
        _maybe_checkpoint(cfg, checkpoint_path, model, opt, None, e, epochs)
    return TrainReport(mode=cfg.mode, config=asdict(cfg), per_epoch=history,
                       wall_time=time.time() - t0,
                       final_acc=history[-1].acc, final_asr=history[-1].asr,
                       model=model, per_sample_losses=losses)


def warm_loss_profile(cfg: TrainConfig, ds: Dataset, epochs: int = 10):
    """Plain warm training; returns (model, per-sample CE losses after `epochs`)."""
    report = _train_plain(cfg, ds, test_ds=None, epochs=epochs)
    return report.model, report.per_sample_losses


def fpf_isolation_baseline(cfg: TrainConfig, ds: Dataset, isolate_fraction=None,
                           warm_epochs=None, test_ds=None) -> TrainReport:
    """Lowest-loss isolation: warm-train on everything, flag the quietest samples.

    Works only when poisoned samples are fitted first; cover samples break
    that premise.
    """
    t0 = time.time()
    isolate_fraction = cfg.fpf_isolate_fraction if isolate_fraction is None else isolate_fraction
    warm_epochs = cfg.fpf_warm_epochs if warm_epochs is None else warm_epochs
    report = _train_plain(cfg, ds, test_ds, epochs=warm_epochs)
    losses = report.per_sample_losses
    n_flag = round(isolate_fraction * ds.n)
    suspects = np.zeros(ds.n, dtype=bool)
    if n_flag > 0:
        suspects[np.argsort(losses, kind="stable")[:n_flag]] = True
    report.mode = "fpf_isolation"
    report.suspects = suspects
    report.wall_time = time.time() - t0
    return report


def _view_rows(mask, n, n_views):
    """Flat row indices of every view of the masked samples (views stacked)."""
    base = np.flatnonzero(mask)
    return (base[None, :] + n * np.arange(n_views)[:, None]).ravel()


def _train_guided(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
                  test_ds, weights_csv, checkpoint_path=None) -> TrainReport:
    t0 = time.time()
    use_lcv = cfg.mode in ("pgrl", "lcv_only")
    use_weights = cfg.mode in ("pgrl", "wce_only")
    k = train_ds.k
    model = Model(_model_config(cfg, train_ds.in_dim, k), seed=cfg.seed)
    opt = Adam(model, cfg.lr_start, cfg.lr_end, cfg.epochs)
    w_state = WeightState.initial(train_ds.n, cfg.lam, cfg.reduced_dim)
    trigger = trigger_for_attack(train_ds.attack, train_ds.in_dim)
    target = train_ds.attack.target if train_ds.attack else None
    scale_range = (cfg.aug_scale_low, cfg.aug_scale_high)
    history = []
    final_untrusted = np.zeros(train_ds.n, dtype=bool)

    for e in range(1, cfg.epochs + 1):
        opt.set_epoch(e - 1)
        if e <= cfg.warmup_epochs:
            # warm-up sees only the validation set; augmented copies ride
            # along so the handful of warm steps shape a usable sphere
            order = stream(cfg.seed, "order", e).permutation(val_ds.n)
            aug_rng = stream(cfg.seed, "aug", e)
            mean_loss = 0.0
            for lo in range(0, val_ds.n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                xb, yb = val_ds.x[idx], val_ds.y[idx]
                views = [xb] + [augment_batch(xb, aug_rng, cfg.aug_sigma,
                                              cfg.aug_jitter_pairs, scale_range)
                                for _ in range(cfg.n_aug)]
                flat = np.concatenate(views, axis=0)
                ys = np.tile(yb, cfg.n_aug + 1)
                model.forward(flat)
                loss, dlogits = wce_value_grad(model.last_logits, ys,
                                               np.ones(len(ys)), np.arange(len(ys)))
                model.backward(dlogits)
                opt.step(model)
                mean_loss += loss
            mean_loss /= val_ds.n * (cfg.n_aug + 1)
            trusted_frac = 1.0
            class_counts = [0] * k
        else:
            order = stream(cfg.seed, "order", e).permutation(train_ds.n)
            aug_rng = stream(cfg.seed, "aug", e)
            total_loss = 0.0
            total_rows = 0
            n_trusted = 0
            class_counts = np.zeros(k, dtype=np.int64)
            epoch_untrusted = np.zeros(train_ds.n, dtype=bool)
            for lo in range(0, train_ds.n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                xb, yb = train_ds.x[idx], train_ds.y[idx]
                nb = len(idx)
                views = np.stack([
                    augment_batch(xb, aug_rng, cfg.aug_sigma,
                                  cfg.aug_jitter_pairs, scale_range)
                    for _ in range(cfg.n_aug)
                ])
                flat = views.reshape(cfg.n_aug * nb, train_ds.in_dim)
                if use_lcv:
                    # prototypes first: the flat forward below must be the
                    # most recent one so its caches feed the backward pass
                    protos = build_prototypes(model, val_ds)
                sphere = model.forward(flat)[1]
                if use_lcv:
                    scores = sphere.reshape(cfg.n_aug, nb, -1) @ protos.T
                    if cfg.use_ot:
                        Qs = sinkhorn_many(scores, cfg.epsilon,
                                           max_iters=cfg.sinkhorn_max_iters,
                                           tol=cfg.sinkhorn_tol, warn=False)
                        p = pseudo_label(votes=list(Qs))
                    else:
                        p = pseudo_label(votes=list(scores))
                    split = lcv_split(p, yb)
                    trusted_mask = np.zeros(nb, dtype=bool)
                    trusted_mask[split.trusted] = True
                    epoch_untrusted[idx[~trusted_mask]] = True
                else:
                    trusted_mask = np.ones(nb, dtype=bool)
                n_trusted += int(trusted_mask.sum())
                class_counts += np.bincount(yb[trusted_mask], minlength=k)
                if not trusted_mask.any():
                    logger.debug("epoch %d: batch at %d has no trusted samples, skipped", e, lo)
                    continue
                loss, dlogits = wce_value_grad(
                    model.last_logits,
                    np.tile(yb, cfg.n_aug),
                    np.tile(w_state.w_star[idx], cfg.n_aug),
                    _view_rows(trusted_mask, nb, cfg.n_aug),
                )
                model.backward(dlogits)
                opt.step(model)
                total_loss += loss
                total_rows += int(trusted_mask.sum()) * cfg.n_aug
            mean_loss = total_loss / total_rows if total_rows else 0.0
            trusted_frac = n_trusted / train_ds.n
            class_counts = [int(c) for c in class_counts]
            if e == cfg.epochs:
                final_untrusted = epoch_untrusted

        weights_updated = False
        if (use_weights and cfg.weight_every > 0 and e >= cfg.warmup_epochs
                and e % cfg.weight_every == 0):
            f_train = model.forward(train_ds.x)[0]
            f_val = model.forward(val_ds.x)[0]
            q, tau, w_raw, _ = estimate_raw_weights(
                f_train, train_ds.y, f_val, val_ds.y, k,
                cfg.reduced_dim, cfg.keep_fraction)
            update_weights(w_state, w_raw)
            w_state.tau = tau
            w_state.q = q
            weights_updated = True
            if weights_csv is not None:
                append_weight_round(weights_csv, w_state.rounds, q, w_raw,
                                    w_state.w_star, train_ds.flags)

        acc, asr, ben_q, poi_q, _ = _epoch_eval(model, train_ds, test_ds, trigger, target)
        history.append(EpochStats(epoch=e, lr=opt.lr, mean_loss=mean_loss,
                                  trusted_frac=trusted_frac, acc=acc, asr=asr,
                                  trusted_class_counts=class_counts,
                                  benign_loss_q=ben_q, poisoned_loss_q=poi_q,
                                  weights_updated=weights_updated))
        _maybe_checkpoint(cfg, checkpoint_path, model, opt, w_state, e, cfg.epochs)

    if use_weights and w_state.rounds > 0:
        suspects = detect_poison(w_state)
    elif use_lcv:
        suspects = final_untrusted
    else:
        suspects = None
    return TrainReport(mode=cfg.mode, config=asdict(cfg), per_epoch=history,
                       wall_time=time.time() - t0,
                       final_acc=history[-1].acc, final_asr=history[-1].asr,
                       model=model, weight_state=w_state, suspects=suspects)


def save_checkpoint(path, model: Model, opt: Adam, w_state: WeightState | None,
                    cfg: TrainConfig, epoch: int):
    """Model parameters + optimizer state + weight state in one npz file."""
    arrays = {f"param:{name}": p for name, p in model.named_params()}
    for name in list(dict(model.named_params())):
        arrays[f"adam_m:{name}"] = opt.m[name]
        arrays[f"adam_v:{name}"] = opt.v[name]
    if w_state is not None:
        arrays["w_star"] = w_state.w_star
        if w_state.w_raw is not None:
            arrays["w_raw"] = w_state.w_raw
        if w_state.q is not None:
            arrays["q"] = w_state.q
    meta = {"config": asdict(cfg), "epoch": epoch, "adam_t": opt.t,
            "in_dim": model.cfg.in_dim, "k": model.cfg.k,
            "w_rounds": w_state.rounds if w_state is not None else 0,
            "w_tau": w_state.tau if w_state is not None else None}
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Inverse of save_checkpoint: (model, opt, w_state, cfg, epoch)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta_json"].tobytes()).decode())
        cfg = TrainConfig(**meta["config"])
        model = Model(_model_config(cfg, meta["in_dim"], meta["k"]), seed=cfg.seed)
        opt = Adam(model, cfg.lr_start, cfg.lr_end, cfg.epochs)
        for name, p in model.named_params():
            p[...] = z[f"param:{name}"]
            opt.m[name][...] = z[f"adam_m:{name}"]
            opt.v[name][...] = z[f"adam_v:{name}"]
        opt.t = meta["adam_t"]
        opt.set_epoch(meta["epoch"])
        w_state = None
        if "w_star" in z:
            w_state = WeightState(w_star=z["w_star"].copy(), lam=cfg.lam,
                                  reduced_dim=cfg.reduced_dim,
                                  tau=meta["w_tau"], rounds=meta["w_rounds"])
            if "w_raw" in z:
                w_state.w_raw = z["w_raw"].copy()
            if "q" in z:
                w_state.q = z["q"].copy()
    return model, opt, w_state, cfg, meta["epoch"]
