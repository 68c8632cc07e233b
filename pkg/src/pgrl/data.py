"""Synthetic datasets, backdoor poisoning attacks, augmentation, dataset files.

Inputs are flattened "images": float64 vectors in [0,1]^in_dim. Every sample
carries a provenance flag (benign / poisoned / cover) and its original label,
set once at attack time and never mutated afterwards.

Attack families are desk-scale analogues of the usual image triggers:

* pattern   -- a coordinate patch overwritten with a fixed value, labels
               flipped to the target class (optionally plus cover samples);
* adapblend -- a weak partial blend toward a fixed pattern at train time
               (random half of the masked coordinates per sample) with a
               stronger full-mask blend at test time, plus correctly-labeled
               cover samples carrying the same train-time trigger;
* freq      -- an additive alternating-sign perturbation on target-class
               samples only, labels untouched (clean-label).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import stream

FLAG_BENIGN = 0
FLAG_POISONED = 1
FLAG_COVER = 2
FLAG_NAMES = {FLAG_BENIGN: "benign", FLAG_POISONED: "poisoned", FLAG_COVER: "cover"}

DATASET_FORMAT = "pgrl-dataset v1"


@dataclass
class AttackSpec:
    kind: str  # pattern | adapblend | freq
    alpha: float
    target: int
    params: dict = field(default_factory=dict)


@dataclass
class Dataset:
    x: np.ndarray  # (n, in_dim) float64 in [0,1]
    y: np.ndarray  # (n,) int labels in [0, k)
    flags: np.ndarray  # (n,) int provenance flags
    original_label: np.ndarray  # (n,) label before any relabeling
    k: int
    attack: AttackSpec | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def in_dim(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "Dataset":
        return Dataset(self.x.copy(), self.y.copy(), self.flags.copy(),
                       self.original_label.copy(), self.k, self.attack)

    def counts(self):
        """(benign, poisoned, cover) counts."""
        return (int((self.flags == FLAG_BENIGN).sum()),
                int((self.flags == FLAG_POISONED).sum()),
                int((self.flags == FLAG_COVER).sum()))


def gen_synthetic(n_per_class: int, k: int, in_dim: int, seed: int,
                  geometry: str = "blobs", noise: float = 0.12,
                  separation: float = 1.0) -> Dataset:
    """Clean, class-balanced dataset of k * n_per_class samples in [0,1]^in_dim."""
    if k < 2:
        raise ConfigError(f"need at least 2 classes, got k={k}")
    if in_dim < 16:
        raise ConfigError(f"in_dim={in_dim} too small to host a trigger patch (need >= 16)")
    rng = stream(seed, "gen")
    if geometry == "blobs":
        means = 0.5 + separation * rng.uniform(-0.35, 0.35, size=(k, in_dim))
    elif geometry == "grid_patterns":
        side = math.isqrt(in_dim)
        if side * side != in_dim:
            raise ConfigError(f"grid_patterns needs a square in_dim, got {in_dim}")
        # class template: per-2x2-block binary pattern, scaled by separation
        blocks = (side + 1) // 2
        bits = rng.integers(0, 2, size=(k, blocks, blocks)).astype(np.float64)
        cells = np.kron(bits, np.ones((2, 2)))[:, :side, :side].reshape(k, in_dim)
        means = 0.5 + separation * (cells - 0.5) * 0.5
    else:
        raise ConfigError(f"unknown geometry {geometry!r}")
    y = np.repeat(np.arange(k), n_per_class)
    x = np.clip(means[y] + noise * rng.normal(size=(k * n_per_class, in_dim)), 0.0, 1.0)
    return Dataset(x=x, y=y.astype(np.int64), flags=np.zeros(len(y), dtype=np.int64),
                   original_label=y.astype(np.int64), k=k)


def split_train_val_test(ds: Dataset, val_per_class: int, test_per_class: int,
                         seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Carve class-balanced validation and test sets out of a clean dataset.

    Runs before any poisoning, so the validation set is benign by
    construction.
    """
    rng = stream(seed, "split")
    val_idx, test_idx = [], []
    for j in range(ds.k):
        cls = np.flatnonzero(ds.y == j)
        need = val_per_class + test_per_class
        if len(cls) < need + 1:
            raise ConfigError(f"class {j} has {len(cls)} samples, needs > {need} for the split")
        chosen = rng.choice(cls, size=need, replace=False)
        val_idx.append(chosen[:val_per_class])
        test_idx.append(chosen[val_per_class:])
    val_idx = np.concatenate(val_idx)
    test_idx = np.concatenate(test_idx)
    held = np.zeros(ds.n, dtype=bool)
    held[val_idx] = True
    held[test_idx] = True
    train_idx = np.flatnonzero(~held)

    def take(idx):
        return Dataset(ds.x[idx].copy(), ds.y[idx].copy(), ds.flags[idx].copy(),
                       ds.original_label[idx].copy(), ds.k)

    return take(train_idx), take(val_idx), take(test_idx)


def _pick_indices(rng, n, count, exclude=None):
    pool = np.arange(n) if exclude is None else np.setdiff1d(np.arange(n), exclude)
    if count > len(pool):
        raise ValueError(f"cannot pick {count} samples from a pool of {len(pool)}")
    return np.sort(rng.choice(pool, size=count, replace=False))


def default_patch_coords(in_dim: int, patch_size: int = 6) -> np.ndarray:
    """Trailing coordinates: the flattened analogue of a corner patch."""
    return np.arange(in_dim - patch_size, in_dim)


def apply_pattern_attack(ds: Dataset, alpha: float, target: int,
                         patch_coords=None, patch_value: float = 1.0,
                         cover_ratio: float = 0.0, seed: int = 0) -> Dataset:
    """Patch trigger with label corruption; optional correctly-labeled covers."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0,1), got {alpha}")
    coords = default_patch_coords(ds.in_dim) if patch_coords is None else np.asarray(patch_coords)
    if coords.size and (coords.min() < 0 or coords.max() >= ds.in_dim):
        raise ValueError("patch does not fit in the input dimensions")
    rng = stream(seed, "pattern")
    out = ds.copy()
    n_poison = round(alpha * ds.n)
    # label corruption poisons samples from outside the target class
    pois = _pick_indices(rng, ds.n, n_poison, exclude=np.flatnonzero(ds.y == target))
    out.x[np.ix_(pois, coords)] = patch_value
    out.y[pois] = target
    out.flags[pois] = FLAG_POISONED
    if cover_ratio > 0.0:
        cov = _pick_indices(rng, ds.n, round(cover_ratio * ds.n), exclude=pois)
        if np.intersect1d(pois, cov).size:
            raise RuntimeError("internal error: poisoned and cover index sets overlap")
        out.x[np.ix_(cov, coords)] = patch_value
        out.flags[cov] = FLAG_COVER
    out.attack = AttackSpec("pattern", alpha, target, {
        "patch_coords": [int(c) for c in coords],
        "patch_value": float(patch_value),
        "cover_ratio": float(cover_ratio),
        "seed": int(seed),
    })
    return out


def pattern_trigger(x, patch_coords, patch_value):
    out = np.array(x, dtype=np.float64, copy=True)
    out[..., np.asarray(patch_coords)] = patch_value
    return out


def _adapblend_pattern(seed: int, in_dim: int) -> np.ndarray:
    # high-contrast binary blend image: salient enough that a few weakly
    # blended samples can tilt the strong-blend extreme toward the target
    return stream(seed, "blendpat").integers(0, 2, size=in_dim).astype(np.float64)


def apply_adapblend_attack(ds: Dataset, alpha: float, target: int,
                           blend_mask=None, cover_ratio: float | None = None,
                           test_strength: float = 0.9, train_strength: float = 0.55,
                           seed: int = 0) -> Dataset:
    """Weak partial blend at train time, strong full blend at test time, covers.

    Train-time: each poisoned/cover sample blends a random half of the masked
    coordinates toward a fixed pattern at `train_strength`. Test-time
    activation (see `adapblend_trigger`) blends the full mask at
    `test_strength`. Cover samples keep their original labels.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0,1), got {alpha}")
    if cover_ratio is None:
        cover_ratio = 3.0 * alpha
    if cover_ratio < 0.0:
        raise ValueError(f"cover_ratio must be >= 0, got {cover_ratio}")
    mask = np.arange(ds.in_dim) if blend_mask is None else np.asarray(blend_mask)
    pattern = _adapblend_pattern(seed, ds.in_dim)
    rng = stream(seed, "adapblend")
    out = ds.copy()
    # label corruption poisons samples from outside the target class; covers
    # also come from non-target classes (a trigger-carrying target-class
    # sample teaches trigger -> target on its own, which defeats the covers'
    # camouflage purpose)
    target_rows = np.flatnonzero(ds.y == target)
    pois = _pick_indices(rng, ds.n, round(alpha * ds.n), exclude=target_rows)
    cov = _pick_indices(rng, ds.n, round(cover_ratio * ds.n),
                        exclude=np.union1d(pois, target_rows))
    if np.intersect1d(pois, cov).size:
        raise RuntimeError("internal error: poisoned and cover index sets overlap")
    half = max(1, len(mask) // 2) if len(mask) else 0
    for i in np.concatenate([pois, cov]):
        sel = rng.choice(mask, size=half, replace=False)
        out.x[i, sel] = (1.0 - train_strength) * out.x[i, sel] + train_strength * pattern[sel]
    out.y[pois] = target
    out.flags[pois] = FLAG_POISONED
    out.flags[cov] = FLAG_COVER
    out.attack = AttackSpec("adapblend", alpha, target, {
        "blend_mask": [int(c) for c in mask],
        "pattern": [float(v) for v in pattern],
        "cover_ratio": float(cover_ratio),
        "test_strength": float(test_strength),
        "train_strength": float(train_strength),
        "seed": int(seed),
    })
    return out


def adapblend_trigger(x, blend_mask, pattern, test_strength):
    out = np.array(x, dtype=np.float64, copy=True)
    mask = np.asarray(blend_mask)
    out[..., mask] = (1.0 - test_strength) * out[..., mask] + test_strength * pattern[mask]
    return out


def _freq_pattern(in_dim: int, amplitude: float) -> np.ndarray:
    signs = np.where(np.arange(in_dim) % 2 == 0, 1.0, -1.0)
    return amplitude * signs


def apply_freq_attack(ds: Dataset, alpha: float, target: int,
                      amplitude: float = 0.7, seed: int = 0) -> Dataset:
    """Clean-label attack: additive high-frequency signal on target-class samples."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0,1), got {alpha}")
    rng = stream(seed, "freq")
    eligible = np.flatnonzero(ds.y == target)
    n_poison = round(alpha * ds.n)
    if len(eligible) < n_poison:
        raise ValueError(f"class {target} has {len(eligible)} samples, "
                         f"fewer than round(alpha*N)={n_poison}")
    out = ds.copy()
    pois = np.sort(rng.choice(eligible, size=n_poison, replace=False))
    out.x[pois] = np.clip(out.x[pois] + _freq_pattern(ds.in_dim, amplitude), 0.0, 1.0)
    out.flags[pois] = FLAG_POISONED
    out.attack = AttackSpec("freq", alpha, target, {
        "amplitude": float(amplitude),
        "seed": int(seed),
    })
    return out


def freq_trigger(x, amplitude):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x + _freq_pattern(x.shape[-1], amplitude), 0.0, 1.0)


def trigger_for_attack(attack: AttackSpec | None, in_dim: int):
    """Test-time trigger applier for an attack, or None for clean data."""
    if attack is None:
        return None
    p = attack.params
    if attack.kind == "pattern":
        return lambda x: pattern_trigger(x, p["patch_coords"], p["patch_value"])
    if attack.kind == "adapblend":
        pattern = np.asarray(p["pattern"], dtype=np.float64)
        return lambda x: adapblend_trigger(x, p["blend_mask"], pattern, p["test_strength"])
    if attack.kind == "freq":
        return lambda x: freq_trigger(x, p["amplitude"])
    raise ValueError(f"unknown attack kind {attack.kind!r}")


def augment_batch(X, rng: np.random.Generator, sigma: float = 0.05,
                  jitter_pairs: int = 2, scale_range=(0.9, 1.1)):
    """Label-preserving randomized views: per-feature scaling, additive noise,
    a few adjacent-coordinate swaps; clipped back to [0,1]."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    lo, hi = scale_range
    out = X * rng.uniform(lo, hi, size=(n, d))
    if sigma > 0.0:
        out += rng.normal(0.0, sigma, size=(n, d))
    if jitter_pairs > 0:
        pos = rng.integers(0, d - 1, size=(n, jitter_pairs))
        rows = np.arange(n)[:, None]
        a = out[rows, pos].copy()
        out[rows, pos] = out[rows, pos + 1]
        out[rows, pos + 1] = a
    return np.clip(out, 0.0, 1.0)


def augment(x, seed: int, sigma: float = 0.05, jitter_pairs: int = 2,
            scale_range=(0.9, 1.1)):
    """One augmented view of a single sample."""
    rng = stream(seed, "augment")
    return augment_batch(np.asarray(x)[None, :], rng, sigma, jitter_pairs, scale_range)[0]


def save_dataset(ds: Dataset, path):
    """Versioned CSV: header comments, then one row per sample."""
    attack = ds.attack
    lines = [f"# {DATASET_FORMAT}"]
    lines.append(
        f"# n={ds.n} in_dim={ds.in_dim} k={ds.k} "
        f"alpha={attack.alpha if attack else 0.0} "
        f"target={attack.target if attack else -1} "
        f"attack={attack.kind if attack else 'none'}"
    )
    if attack is not None:
        lines.append("# attack_params=" + json.dumps(attack.params, sort_keys=True))
    cols = [f"x{i}" for i in range(ds.in_dim)] + ["y", "flag", "original_label"]
    lines.append(",".join(cols))
    for i in range(ds.n):
        row = [repr(float(v)) for v in ds.x[i]]
        row += [str(int(ds.y[i])), str(int(ds.flags[i])), str(int(ds.original_label[i]))]
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != f"# {DATASET_FORMAT}":
        raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
    meta = dict(tok.split("=", 1) for tok in lines[1][2:].split())
    params = {}
    body = 2
    if lines[body].startswith("# attack_params="):
        params = json.loads(lines[body].split("=", 1)[1])
        body += 1
    body += 1  # column header
    in_dim = int(meta["in_dim"])
    rows = [ln.split(",") for ln in lines[body:] if ln]
    data = np.array(rows, dtype=np.float64)
    x = data[:, :in_dim]
    y = data[:, in_dim].astype(np.int64)
    flags = data[:, in_dim + 1].astype(np.int64)
    orig = data[:, in_dim + 2].astype(np.int64)
    kind = meta["attack"]
    attack = None
    if kind != "none":
        attack = AttackSpec(kind, float(meta["alpha"]), int(meta["target"]), params)
    return Dataset(x=x, y=y, flags=flags, original_label=orig, k=int(meta["k"]), attack=attack)
