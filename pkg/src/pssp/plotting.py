"""Figures written next to the CSV/JSON outputs of ``train`` and ``eval``."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import Q8_ALPHABET  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_learning_curve(rows, path):
    """Training loss and validation Q8 against iteration, from metric-log rows."""
    rows = list(rows)
    with plt.rc_context(STYLE):
        fig, ax_loss = plt.subplots(figsize=(5.0, 3.2))
        if rows:
            it = [r[0] for r in rows]
            ax_loss.plot(it, [r[2] for r in rows], color="tab:blue", label="train loss")
            ax_q8 = ax_loss.twinx()
            ax_q8.plot(it, [r[3] for r in rows], color="tab:red", marker="o", ms=3, label="val Q8")
            ax_q8.set_ylabel("validation Q8")
            ax_q8.set_ylim(0, 1)
        ax_loss.set_xlabel("iteration")
        ax_loss.set_ylabel("train loss")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_confusion(matrix, path, title=None):
    """Row-normalised confusion matrix (rows: true class, columns: predicted)."""
    c = np.asarray(matrix, dtype=np.float64)
    totals = c.sum(axis=1, keepdims=True)
    frac = np.divide(c, totals, out=np.zeros_like(c), where=totals > 0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.8))
        im = ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
        ticks = range(len(Q8_ALPHABET))
        ax.set_xticks(ticks, list(Q8_ALPHABET))
        ax.set_yticks(ticks, list(Q8_ALPHABET))
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path
