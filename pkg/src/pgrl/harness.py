"""Reproducible experiment driver: spec parsing, sweeps, persistence, plots.

Spec files are flat, line-oriented text (diff-friendly):

    # comment
    name = pattern_demo
    seeds = 0, 1
    dataset.k = 4
    attack.kind = pattern
    attack.alpha = 0.05
    train.mode = pgrl
    sweep.train.n_aug = 1, 2, 4, 6

Grammar: one `key = value` per line; `#` starts a comment; keys are dotted
identifiers; values are ints, floats, booleans (true/false), bare strings, or
comma-separated lists of those. A `sweep.<key>` line turns <key> into an axis;
runs are the Cartesian product of all axes times the seed list. Every run is
fully determined by its resolved point and seed; completed runs are skipped on
rerun (idempotent by point hash + seed).

Each run directory holds the resolved point (spec.txt), record.json,
metrics.csv (per-epoch rows), weights.csv (weight-estimation rounds), and any
figures rendered by `plot`.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import (FLAG_POISONED, apply_adapblend_attack, apply_freq_attack,
                   apply_pattern_attack, default_patch_coords, gen_synthetic,
                   split_train_val_test)
from .errors import SpecError
from .metrics import auc10, compute_tpr_fpr
from .plots import plot_acc_asr, plot_loss_boxes
from .seeding import derive
from .training import TrainConfig, train, warm_loss_profile

# key -> (type, default). None default means "derived elsewhere".
_BOOL, _INT, _FLOAT, _STR = bool, int, float, str
SPEC_KEYS = {
    "name": (_STR, "exp"),
    "seeds": (list, [0]),
    "out": (_STR, None),
    "dataset.geometry": (_STR, "blobs"),
    "dataset.k": (_INT, 4),
    "dataset.in_dim": (_INT, 64),
    "dataset.train_per_class": (_INT, 1000),
    "dataset.val_per_class": (_INT, 10),
    "dataset.test_per_class": (_INT, 250),
    "dataset.noise": (_FLOAT, 0.12),
    "dataset.separation": (_FLOAT, 1.0),
    "attack.kind": (_STR, "none"),
    "attack.alpha": (_FLOAT, 0.0),
    "attack.target": (_INT, 0),
    "attack.patch_size": (_INT, 6),
    "attack.patch_value": (_FLOAT, 1.0),
    "attack.cover_ratio": (_FLOAT, None),  # None: kind-specific default
    "attack.test_strength": (_FLOAT, 0.9),
    "attack.train_strength": (_FLOAT, 0.55),
    "attack.amplitude": (_FLOAT, 0.7),
    "train.mode": (_STR, "pgrl"),
    "train.epochs": (_INT, 55),
    "train.warmup_epochs": (_INT, 5),
    "train.batch_size": (_INT, 64),
    "train.epsilon": (_FLOAT, 0.05),
    "train.lambda": (_FLOAT, 0.5),
    "train.keep_fraction": (_FLOAT, 0.9),
    "train.n_aug": (_INT, 6),
    "train.reduced_dim": (_INT, 10),
    "train.weight_every": (_INT, 5),
    "train.use_ot": (_BOOL, True),
    "train.lr_start": (_FLOAT, 0.01),
    "train.lr_end": (_FLOAT, 0.0001),
    "train.checkpoint_every": (_INT, 0),
    "model.d1": (_INT, 32),
    "model.d2": (_INT, 16),
    "model.f_hidden": (_INT, 64),
    "model.s_hidden": (_INT, 32),
    "eval.auc10": (_BOOL, False),
}
_MODES = ("pgrl", "lcv_only", "wce_only", "naive", "fpf_isolation")
_GEOMETRIES = ("blobs", "grid_patterns")
_KINDS = ("none", "pattern", "adapblend", "freq")


def _parse_scalar(tok: str):
    tok = tok.strip()
    low = tok.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        pass
    return tok


def parse_spec_text(text: str) -> dict:
    """Raw flat dict from spec text; syntax errors raise SpecError."""
    flat = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or any(not tok.isidentifier() for tok in key.split(".")):
            problems.append(f"line {lineno}: bad key {key!r}")
            continue
        if key in flat:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        if "," in val:
            flat[key] = [_parse_scalar(t) for t in val.split(",")]
        else:
            flat[key] = _parse_scalar(val)
    if problems:
        raise SpecError(problems)
    return flat


def _coerce(key, value, want, problems):
    if want is list:
        vals = value if isinstance(value, list) else [value]
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
            problems.append(f"{key}: expected a list of ints, got {value!r}")
        return vals
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool and not isinstance(value, bool):
        problems.append(f"{key}: expected true/false, got {value!r}")
        return value
    if want in (int, float, str) and (not isinstance(value, want) or isinstance(value, bool)):
        problems.append(f"{key}: expected {want.__name__}, got {value!r}")
    return value


@dataclass
class ExperimentSpec:
    name: str
    seeds: list
    base: dict  # resolved non-sweep values, keyed as in SPEC_KEYS
    axes: dict = field(default_factory=dict)  # key -> list of values
    out: str | None = None

    def points(self) -> list[dict]:
        """Cartesian product of the sweep axes over the base config."""
        if not self.axes:
            return [dict(self.base)]
        keys = sorted(self.axes)
        pts = []
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            point = dict(self.base)
            point.update(dict(zip(keys, combo)))
            pts.append(point)
        return pts


def validate_spec(flat: dict) -> ExperimentSpec:
    """Typed, defaulted spec; raises SpecError listing every violation."""
    problems = []
    base = {}
    axes = {}
    for key, value in flat.items():
        if key.startswith("sweep."):
            target = key[len("sweep."):]
            if target not in SPEC_KEYS or target in ("name", "seeds", "out"):
                problems.append(f"{key}: unknown sweep target {target!r}")
                continue
            want = SPEC_KEYS[target][0]
            vals = value if isinstance(value, list) else [value]
            if not vals:
                problems.append(f"{key}: empty sweep axis")
            axes[target] = [_coerce(target, v, want, problems) for v in vals]
        elif key in SPEC_KEYS:
            base[key] = _coerce(key, value, SPEC_KEYS[key][0], problems)
        else:
            problems.append(f"unknown key {key!r}")
    for key, (_, default) in SPEC_KEYS.items():
        base.setdefault(key, default)

    def chk(cond, msg):
        # a mistyped value was already reported; don't let it crash the rest
        try:
            ok = cond()
        except TypeError:
            return
        if not ok:
            problems.append(msg)

    chk(lambda: base["train.mode"] in _MODES, f"train.mode: must be one of {_MODES}")
    chk(lambda: base["dataset.geometry"] in _GEOMETRIES,
        f"dataset.geometry: must be one of {_GEOMETRIES}")
    chk(lambda: base["attack.kind"] in _KINDS, f"attack.kind: must be one of {_KINDS}")
    chk(lambda: base["dataset.k"] >= 2, "dataset.k: need at least 2 classes")
    chk(lambda: base["dataset.in_dim"] >= 16, "dataset.in_dim: must be >= 16")
    chk(lambda: base["dataset.val_per_class"] >= 1, "dataset.val_per_class: must be >= 1")
    chk(lambda: base["dataset.test_per_class"] >= 1, "dataset.test_per_class: must be >= 1")
    chk(lambda: 0.0 <= base["attack.alpha"] < 1.0, "attack.alpha: must be in [0,1)")
    chk(lambda: 0 <= base["attack.target"] < base["dataset.k"],
        "attack.target: must be a valid class")
    chk(lambda: base["train.warmup_epochs"] < base["train.epochs"],
        "train.warmup_epochs: must be < train.epochs")
    chk(lambda: base["train.n_aug"] >= 1, "train.n_aug: must be >= 1")
    chk(lambda: base["train.epsilon"] > 0, "train.epsilon: must be positive")
    chk(lambda: 0.0 <= base["train.keep_fraction"] <= 1.0,
        "train.keep_fraction: must be in [0,1]")
    chk(lambda: 0.0 <= base["train.lambda"] <= 1.0, "train.lambda: must be in [0,1]")
    chk(lambda: 1 <= base["train.reduced_dim"] <= base["model.d1"],
        "train.reduced_dim: must be in [1, model.d1]")
    seeds = base.pop("seeds")
    name = base.pop("name")
    out = base.pop("out")
    chk(lambda: bool(seeds), "seeds: need at least one seed")
    chk(lambda: all(ch.isalnum() or ch in "-_" for ch in name),
        "name: use only [A-Za-z0-9_-]")
    if problems:
        raise SpecError(problems)
    return ExperimentSpec(name=name, seeds=seeds, base=base, axes=axes, out=out)


def load_spec(path) -> ExperimentSpec:
    return validate_spec(parse_spec_text(Path(path).read_text()))


def point_text(point: dict) -> str:
    """Canonical flat rendering of a resolved point (hash input and spec.txt)."""
    lines = []
    for key in sorted(point):
        v = point[key]
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def point_hash(point: dict) -> str:
    return hashlib.sha256(point_text(point).encode()).hexdigest()[:12]


def build_datasets(point: dict, seed: int):
    """(poisoned train, val, test) for one resolved point and seed."""
    total = (point["dataset.train_per_class"] + point["dataset.val_per_class"]
             + point["dataset.test_per_class"])
    clean = gen_synthetic(total, point["dataset.k"], point["dataset.in_dim"],
                          seed=derive(seed, "data"),
                          geometry=point["dataset.geometry"],
                          noise=point["dataset.noise"],
                          separation=point["dataset.separation"])
    train_c, val, test = split_train_val_test(
        clean, point["dataset.val_per_class"], point["dataset.test_per_class"],
        seed=derive(seed, "split"))
    kind = point["attack.kind"]
    aseed = derive(seed, "attack")
    alpha = point["attack.alpha"]
    target = point["attack.target"]
    cover = point["attack.cover_ratio"]
    if kind == "none":
        poisoned = train_c
    elif kind == "pattern":
        coords = default_patch_coords(train_c.in_dim, point["attack.patch_size"])
        poisoned = apply_pattern_attack(train_c, alpha, target, coords,
                                        point["attack.patch_value"],
                                        cover_ratio=0.0 if cover is None else cover,
                                        seed=aseed)
    elif kind == "adapblend":
        poisoned = apply_adapblend_attack(train_c, alpha, target,
                                          cover_ratio=cover,
                                          test_strength=point["attack.test_strength"],
                                          train_strength=point["attack.train_strength"],
                                          seed=aseed)
    elif kind == "freq":
        poisoned = apply_freq_attack(train_c, alpha, target,
                                     amplitude=point["attack.amplitude"], seed=aseed)
    else:  # unreachable after validation
        raise SpecError([f"attack.kind: unknown kind {kind!r}"])
    return poisoned, val, test


def train_config(point: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        mode=point["train.mode"],
        epochs=point["train.epochs"],
        warmup_epochs=point["train.warmup_epochs"],
        batch_size=point["train.batch_size"],
        epsilon=point["train.epsilon"],
        lam=point["train.lambda"],
        keep_fraction=point["train.keep_fraction"],
        n_aug=point["train.n_aug"],
        reduced_dim=point["train.reduced_dim"],
        weight_every=point["train.weight_every"],
        seed=derive(seed, "train"),
        use_ot=point["train.use_ot"],
        lr_start=point["train.lr_start"],
        lr_end=point["train.lr_end"],
        d1=point["model.d1"],
        d2=point["model.d2"],
        f_hidden=point["model.f_hidden"],
        s_hidden=point["model.s_hidden"],
        checkpoint_every=point["train.checkpoint_every"],
    )


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, report, k: int):
    cols = (["epoch", "lr", "loss", "trusted_frac", "acc", "asr"]
            + [f"benign_loss_q{i}" for i in range(5)]
            + [f"poisoned_loss_q{i}" for i in range(5)]
            + [f"trusted_class_{j}" for j in range(k)]
            + ["weights_updated"])
    lines = [",".join(cols)]
    for st in report.per_epoch:
        row = [str(st.epoch), repr(st.lr), repr(st.mean_loss), repr(st.trusted_frac),
               _fmt(st.acc), _fmt(st.asr)]
        row += [_fmt(v) for v in (st.benign_loss_q or [None] * 5)]
        row += [_fmt(v) for v in (st.poisoned_loss_q or [None] * 5)]
        counts = st.trusted_class_counts or [0] * k
        row += [str(c) for c in counts]
        row.append(_fmt(st.weights_updated))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def execute_run(point: dict, seed: int, run_dir: Path) -> dict:
    """Run one (point, seed) pipeline and persist its artifacts."""
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    poisoned, val, test = build_datasets(point, seed)
    cfg = train_config(point, seed)
    weights_csv = run_dir / "weights.csv"
    if weights_csv.exists():
        weights_csv.unlink()
    ckpt = run_dir / "checkpoint.npz"
    report = train(cfg, poisoned, val, test,
                   weights_csv=str(weights_csv), checkpoint_path=str(ckpt))
    metrics = {"acc": report.final_acc, "asr": report.final_asr}
    if report.suspects is not None:
        tpr, fpr = compute_tpr_fpr(report.suspects, poisoned.flags, cover_as_poisoned=True)
        tpr_x, fpr_x = compute_tpr_fpr(report.suspects, poisoned.flags, cover_as_poisoned=False)
        metrics.update(tpr=tpr, fpr=fpr, tpr_cover_excluded=tpr_x,
                       fpr_cover_excluded=fpr_x,
                       suspect_count=int(report.suspects.sum()))
    if point["eval.auc10"] and (poisoned.flags == FLAG_POISONED).any():
        _, losses = warm_loss_profile(train_config(point, seed), poisoned, epochs=10)
        metrics["auc10"] = auc10(losses, poisoned.flags == FLAG_POISONED)
    record = {
        "format": "pgrl-record v1",
        "status": "complete",
        "point_hash": point_hash(point),
        "seed": seed,
        "point": {key: point[key] for key in sorted(point)},
        "metrics": metrics,
        "train": {"mode": report.mode, "wall_time": report.wall_time,
                  "final_trusted_frac": report.per_epoch[-1].trusted_frac},
        "per_epoch": [vars(st).copy() for st in report.per_epoch],
        "timestamps": {"started": started, "finished": time.time()},
    }
    (run_dir / "spec.txt").write_text(point_text(point))
    write_metrics_csv(run_dir / "metrics.csv", report, poisoned.k)
    (run_dir / "record.json").write_text(json.dumps(record, sort_keys=True, indent=1))
    return record


def _load_record(path: Path):
    try:
        rec = json.loads(path.read_text())
        return rec if rec.get("status") == "complete" else None
    except (json.JSONDecodeError, OSError):
        return None


def run_spec(spec: ExperimentSpec, out_dir, progress=None) -> list[dict]:
    """All (point, seed) runs under out_dir; completed ones are skipped.

    Appends each newly computed record to <out>/<name>/records.jsonl.
    """
    root = Path(out_dir) / spec.name
    root.mkdir(parents=True, exist_ok=True)
    log_path = root / "records.jsonl"
    records = []
    for point in spec.points():
        h = point_hash(point)
        for seed in spec.seeds:
            run_dir = root / f"{h}-s{seed}"
            existing = _load_record(run_dir / "record.json")
            if existing is not None:
                records.append(existing)
                if progress:
                    progress(f"skip {run_dir.name} (complete)")
                continue
            if progress:
                progress(f"run  {run_dir.name} mode={point['train.mode']} "
                         f"attack={point['attack.kind']}")
            rec = execute_run(point, seed, run_dir)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            records.append(rec)
    return records


def collect_records(runs_dir) -> list[dict]:
    paths = sorted(Path(runs_dir).glob("**/record.json"))
    records = [r for r in (_load_record(p) for p in paths) if r is not None]
    return records


def plot_records(records: list[dict], out_dir, runs_dir=None) -> list[str]:
    """Loss box plot per record (into its run dir when known) and one
    combined ACC/ASR scatter. Returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        per_epoch = rec.get("per_epoch") or []
        where = out / f"{rec['point_hash']}-s{rec['seed']}_loss_boxplot.svg"
        title = f"{rec['point']['train.mode']} / {rec['point']['attack.kind']}"
        if plot_loss_boxes(per_epoch, where, title=title):
            written.append(str(where))
    points = [{"mode": r["point"]["train.mode"], "acc": r["metrics"].get("acc"),
               "asr": r["metrics"].get("asr")} for r in records]
    scatter = out / "acc_asr_scatter.svg"
    if plot_acc_asr(points, scatter):
        written.append(str(scatter))
    return written
