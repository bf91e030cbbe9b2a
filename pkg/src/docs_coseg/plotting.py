"""Figures written next to the tabular reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "figure.dpi": 110,
        "svg.hashsalt": "docs-coseg",
    }
)


def _save(fig, path):
    fig.tight_layout()
    # no timestamps, so reruns give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_loss(history, path, smooth: int = 50) -> None:
    it = np.array([h.iteration for h in history])
    loss = np.array([h.loss for h in history])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(it, loss, lw=0.5, alpha=0.4, color="tab:blue", label="batch loss")
    if len(loss) >= smooth:
        k = np.ones(smooth) / smooth
        ax.plot(it[smooth - 1 :], np.convolve(loss, k, mode="valid"), color="tab:blue", label=f"mean of {smooth}")
    val = [(h.iteration, h.val_jaccard) for h in history if h.val_jaccard is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:orange", ms=3, label="val Jaccard")
        ax2.set_ylabel("val Jaccard")
        ax2.set_ylim(0, 1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("L_A + L_B")
    ax.legend(loc="upper right", frameon=False)
    _save(fig, path)


def plot_metric_hist(report, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(6, 2.6))
    p = [i.precision for i in report.items]
    j = [i.jaccard for i in report.items]
    axes[0].hist(p, bins=20, range=(0, 100), color="tab:green")
    axes[0].set_xlabel("precision (%)")
    axes[1].hist(j, bins=20, range=(0, 1), color="tab:purple")
    axes[1].set_xlabel("Jaccard")
    axes[0].set_ylabel("pair-sides")
    _save(fig, path)


def plot_k_sweep(rows, path) -> None:
    """``rows`` is a list of ``(k label, precision, jaccard)``."""
    labels = [str(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(4, 2.8))
    ax.plot(labels, [r[2] for r in rows], "o-", label="Jaccard")
    ax.set_ylim(0, 1)
    ax.set_xlabel("partners per image (K)")
    ax.set_ylabel("mean Jaccard")
    _save(fig, path)


def save_heatmap(prob: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(prob, vmin=0, vmax=1, cmap="magma")
    ax.set_axis_off()
    _save(fig, path)
