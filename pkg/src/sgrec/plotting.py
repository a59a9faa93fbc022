"""Static figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {"D": "dimensionality D", "gamma": "sampling rate $\\gamma$", "eta": "category weight $\\eta$", "layers": "CA-GAT layers"}


def _finite(x) -> bool:
    return x is not None and isinstance(x, (int, float)) and math.isfinite(x)


def plot_sweep(rows, axis: str, path) -> None:
    """HR@20 and nDCG@20 against the swept value; failed points are left out."""
    ok = [r for r in rows if _finite(r.get("hr20")) and _finite(r.get("ndcg20"))]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = [float(r["value"]) for r in ok]
    ax.plot(xs, [r["hr20"] for r in ok], "o-", label="HR@20")
    ax.plot(xs, [r["ndcg20"] for r in ok], "s--", label="nDCG@20")
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("score")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_log(log, path) -> None:
    """Training loss per epoch; validation nDCG@20 on a twin axis when present."""
    epochs = [r["epoch"] for r in log]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(epochs, [r["loss"] for r in log], color="C0", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="C0")
    val = [(r["epoch"], r["val_ndcg20"]) for r in log if _finite(r.get("val_ndcg20"))]
    if val:
        twin = ax.twinx()
        twin.plot(*zip(*val), color="C1", marker=".", label="val nDCG@20")
        twin.set_ylabel("validation nDCG@20", color="C1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
