"""Figure emission: per-epoch loss box plots and ACC/ASR scatter, as SVG.

Output is byte-deterministic for identical input (fixed hash salt, no
timestamp metadata), so re-rendered figures diff clean.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_MODE_COLORS = {
    "pgrl": "tab:red",
    "lcv_only": "tab:orange",
    "wce_only": "tab:purple",
    "naive": "tab:gray",
    "fpf_isolation": "tab:blue",
}


def _save_svg(fig, path):
    plt.rcParams["svg.hashsalt"] = "pgrl"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _bxp_stats(quantiles):
    lo, q1, med, q3, hi = quantiles
    return {"whislo": lo, "q1": q1, "med": med, "q3": q3, "whishi": hi, "fliers": []}


def plot_loss_boxes(per_epoch, path, title="training loss by group"):
    """Side-by-side benign/poisoned loss boxes per epoch from stored quantiles.

    `per_epoch` is a list of dicts with keys epoch, benign_loss_q and
    (optionally) poisoned_loss_q. Returns False when there is nothing to draw.
    """
    epochs = [rec for rec in per_epoch if rec.get("benign_loss_q")]
    if not epochs:
        return False
    fig, ax = plt.subplots(figsize=(max(6, 0.28 * len(epochs)), 4))
    width = 0.35
    ben = [_bxp_stats(r["benign_loss_q"]) for r in epochs]
    ax.bxp(ben, positions=[r["epoch"] - width / 2 for r in epochs],
           widths=width, showfliers=False,
           boxprops={"color": "tab:blue"}, medianprops={"color": "tab:blue"},
           whiskerprops={"color": "tab:blue"}, capprops={"color": "tab:blue"})
    pois = [(r["epoch"], _bxp_stats(r["poisoned_loss_q"]))
            for r in epochs if r.get("poisoned_loss_q")]
    if pois:
        ax.bxp([s for _, s in pois], positions=[e + width / 2 for e, _ in pois],
               widths=width, showfliers=False,
               boxprops={"color": "tab:red"}, medianprops={"color": "tab:red"},
               whiskerprops={"color": "tab:red"}, capprops={"color": "tab:red"})
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("per-sample CE loss")
    ax.set_title(title + "  (blue: benign, red: poisoned)")
    ax.set_xticks([r["epoch"] for r in epochs][:: max(1, len(epochs) // 12)])
    fig.tight_layout()
    _save_svg(fig, path)
    return True


def plot_acc_asr(points, path, title="defense operating points"):
    """Scatter of (ASR, ACC) per run, colored by mode.

    `points` is a list of dicts with keys mode, acc, asr.
    """
    usable = [p for p in points if p.get("acc") is not None and p.get("asr") is not None]
    if not usable:
        return False
    fig, ax = plt.subplots(figsize=(5, 4.5))
    seen = set()
    for p in usable:
        mode = p["mode"]
        ax.scatter(p["asr"], p["acc"], s=45,
                   color=_MODE_COLORS.get(mode, "tab:green"),
                   label=mode if mode not in seen else None,
                   edgecolors="black", linewidths=0.4)
        seen.add(mode)
    ax.set_xlim(-0.03, 1.03)
    ax.set_ylim(0.0, 1.03)
    ax.set_xlabel("attack success rate")
    ax.set_ylabel("clean accuracy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save_svg(fig, path)
    return True
