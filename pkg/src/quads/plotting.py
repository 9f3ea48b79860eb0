"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STRATEGY_COLORS = {"distill": "#4c72b0", "quant-after": "#dd8452", "mct": "#55a868"}
INIT_MARKERS = {"random": "o", "pretrained": "s"}


def use_style() -> None:
    plt.rcParams.update(
        {
            "font.size": 9,
            "axes.labelsize": 9,
            "axes.titlesize": 10,
            "legend.fontsize": 8,
            "xtick.labelsize": 8,
            "ytick.labelsize": 8,
            "axes.spines.top": False,
            "axes.spines.right": False,
            "svg.hashsalt": "quads",
            "svg.fonttype": "none",
        }
    )


def _save(fig, path) -> Path:
    path = Path(path)
    kwargs = {"metadata": {"Date": None}} if path.suffix.lower() == ".svg" else {}
    fig.savefig(path, bbox_inches="tight", **kwargs)
    plt.close(fig)
    return path


def _size_mb(row) -> float:
    # unrounded, so toy models far below 0.01 MB still land on the log axis
    if row.get("param_count") not in (None, ""):
        return int(row["param_count"]) * int(row["bits"]) / 8 / 2**20
    return float(row["size_mb_paper"])


def size_f1_figure(rows: list[dict], path, title: str = "Model size vs. macro-F1") -> Path:
    """Bubble scatter: x = all-parameters-at-bit-length size (MB), y = F1, bubble area grows with size."""
    use_style()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    seen = set()
    biggest = max(_size_mb(x) for x in rows) or 1.0
    for r in rows:
        size = _size_mb(r)
        f1 = float(r.get("f1", r.get("median_f1", "nan")))
        strategy, init = r["strategy"], r["init"]
        label = f"{strategy} / {init}"
        ax.scatter(
            size,
            f1,
            s=40 + 400 * size / biggest,
            c=STRATEGY_COLORS.get(strategy, "gray"),
            marker=INIT_MARKERS.get(init, "o"),
            alpha=0.6,
            edgecolors="black",
            linewidths=0.5,
            label=None if label in seen else label,
        )
        seen.add(label)
        ax.annotate(f"{r['bits']}b", (size, f1), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xscale("log")
    ax.set_xlabel("model size (MB, all parameters at bit length)")
    ax.set_ylabel("macro-F1")
    ax.set_ylim(-0.02, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right", frameon=False)
    return _save(fig, path)


def history_figure(history: list[dict], path) -> Path:
    """Training loss and validation F1 per epoch, quantization phases shaded."""
    use_style()
    fig, (ax_loss, ax_f1) = plt.subplots(2, 1, figsize=(5, 4), sharex=True)
    xs = list(range(len(history)))
    totals = [float(h["total"]) for h in history]
    ax_loss.plot(xs, totals, color="black", lw=1)
    ax_f1.plot(xs, [float(h["f1"]) for h in history], color=STRATEGY_COLORS["mct"], lw=1)
    for i, h in enumerate(history):
        if h["phase"] != "distill":
            for ax in (ax_loss, ax_f1):
                ax.axvspan(i - 0.5, i + 0.5, color="#dddddd", lw=0)
    ax_loss.set_ylabel("training loss")
    ax_f1.set_ylabel("val macro-F1")
    ax_f1.set_xlabel("epoch (shaded = quantization phase)")
    return _save(fig, path)
