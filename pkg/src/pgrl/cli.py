"""Command-line entry points.

Subcommands: gen-data, poison, train, eval, sweep, plot. Failures exit
nonzero and print one machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (apply_adapblend_attack, apply_freq_attack,
                   apply_pattern_attack, default_patch_coords, load_dataset,
                   save_dataset, trigger_for_attack)
from .errors import ConfigError, SpecError
from .harness import (build_datasets, collect_records, execute_run, load_spec,
                      plot_records, point_hash, run_spec)
from .metrics import compute_acc_asr
from .seeding import derive
from .training import load_checkpoint


def _fail(kind, message, code, violations=None):
    err = {"error": {"type": kind, "message": message}}
    if violations:
        err["error"]["violations"] = violations
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def _spec_and_out(args, need_out=True):
    spec = load_spec(args.spec)
    out = args.out or spec.out
    if need_out and out is None:
        raise ConfigError("no output directory: pass --out or set `out` in the spec")
    return spec, out


def _single_point(spec, seed_override):
    points = spec.points()
    if len(points) != 1:
        raise ConfigError("this command needs a spec without sweep axes "
                          f"(got {len(points)} points); use `sweep` instead")
    seed = spec.seeds[0] if seed_override is None else seed_override
    return points[0], seed


def cmd_gen_data(args):
    spec, _ = _spec_and_out(args, need_out=False)
    point, seed = _single_point(spec, args.seed)
    point = dict(point, **{"attack.kind": "none"})
    poisoned, _, _ = build_datasets(point, seed)
    save_dataset(poisoned, args.out)
    print(f"wrote clean training set ({poisoned.n} samples) to {args.out}")
    return 0


def cmd_poison(args):
    spec, _ = _spec_and_out(args, need_out=False)
    point, seed = _single_point(spec, args.seed)
    ds = load_dataset(args.data)
    kind = point["attack.kind"]
    if kind == "none":
        raise ConfigError("attack.kind is 'none'; nothing to poison")
    aseed = derive(seed, "attack")
    alpha = point["attack.alpha"]
    target = point["attack.target"]
    cover = point["attack.cover_ratio"]
    if kind == "pattern":
        coords = default_patch_coords(ds.in_dim, point["attack.patch_size"])
        out = apply_pattern_attack(ds, alpha, target, coords,
                                   point["attack.patch_value"],
                                   cover_ratio=0.0 if cover is None else cover,
                                   seed=aseed)
    elif kind == "adapblend":
        out = apply_adapblend_attack(ds, alpha, target, cover_ratio=cover,
                                     test_strength=point["attack.test_strength"],
                                     train_strength=point["attack.train_strength"],
                                     seed=aseed)
    else:
        out = apply_freq_attack(ds, alpha, target,
                                amplitude=point["attack.amplitude"], seed=aseed)
    save_dataset(out, args.out)
    ben, poi, cov = out.counts()
    print(f"wrote {kind} dataset to {args.out} (benign={ben} poisoned={poi} cover={cov})")
    return 0


def cmd_train(args):
    spec, out = _spec_and_out(args)
    point, seed = _single_point(spec, args.seed)
    run_dir = Path(out) / spec.name / f"{point_hash(point)}-s{seed}"
    rec = execute_run(point, seed, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "metrics": rec["metrics"]},
                     sort_keys=True, indent=1))
    return 0


def cmd_eval(args):
    model, _, w_state, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    trigger = trigger_for_attack(ds.attack, ds.in_dim)
    target = ds.attack.target if ds.attack else None
    acc, asr = compute_acc_asr(model, ds, trigger, target)
    out = {"acc": acc, "asr": asr, "n": ds.n}
    if w_state is not None:
        out["suspect_count"] = int((w_state.w_star < 0).sum())
    text = json.dumps(out, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args):
    spec, out = _spec_and_out(args)
    records = run_spec(spec, out, progress=lambda msg: print(msg, flush=True))
    print(f"{len(records)} records under {Path(out) / spec.name}")
    return 0


def cmd_plot(args):
    records = collect_records(args.runs)
    if not records:
        print("no records found; nothing to plot")
        return 0
    written = plot_records(records, args.out or args.runs)
    for path in written:
        print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pgrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        for flag, required in flags.items():
            if flag == "seed":
                p.add_argument("--seed", type=int, default=None)
            else:
                p.add_argument(f"--{flag}", required=required)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, spec=True, out=True, seed=False)
    add("poison", cmd_poison, spec=True, data=True, out=True, seed=False)
    add("train", cmd_train, spec=True, out=False, seed=False)
    add("eval", cmd_eval, checkpoint=True, data=True, out=False)
    add("sweep", cmd_sweep, spec=True, out=False)
    add("plot", cmd_plot, runs=True, out=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SpecError as exc:
        return _fail("spec", str(exc), 2, violations=exc.violations)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("io", str(exc), 1)
    except (ValueError, RuntimeError) as exc:
        return _fail("runtime", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
