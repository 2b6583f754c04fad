"""Figures written next to the JSON/CSV outputs of the command-line tools."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}

MODALITY_COLORS = {"v": "#1f77b4", "t": "#2ca02c", "a": "#d62728"}
MODALITY_LABELS = {"v": "visual", "t": "text", "a": "audio"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_history(history, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        epochs = [e.epoch for e in history.epochs]
        ax.plot(epochs, history.losses, color="k", lw=1.2, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("squared error per video")
        taus = [e.val_tau for e in history.epochs]
        if any(t is not None for t in taus):
            ax2 = ax.twinx()
            ax2.plot(epochs, [np.nan if t is None else t for t in taus], color="#ff7f0e", lw=1.0, label="val tau")
            ax2.set_ylabel("validation Kendall tau")
            ax2.spines["right"].set_visible(True)
        ax.legend(loc="upper right")
        _save(fig, path)


def plot_attention(trace, path, scores=None, dominant=None) -> None:
    """Head-averaged fusion-token weights per CMF block, frames on the x axis."""
    blocks = trace.head_averaged()
    rows = len(blocks) + (scores is not None)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, 1, figsize=(6.5, 1.4 * rows + 0.4), sharex=True, squeeze=False)
        axes = axes[:, 0]
        for ax, (i, w) in zip(axes, enumerate(blocks)):
            x = np.arange(len(w))
            ax.stackplot(x, w.T, colors=[MODALITY_COLORS[m] for m in "vta"],
                         labels=[MODALITY_LABELS[m] for m in "vta"], alpha=0.85)
            if dominant is not None:
                d = np.asarray(dominant)
                for m, c in enumerate("vta"):
                    ax.fill_between(x, 1.0, 1.06, where=d == m, color=MODALITY_COLORS[c], step="mid", lw=0)
                ax.set_ylim(0, 1.06)
            else:
                ax.set_ylim(0, 1)
            ax.set_ylabel(f"CMF {i}")
        axes[0].legend(loc="upper left", ncol=3, frameon=False, bbox_to_anchor=(0, 1.35))
        if scores is not None:
            axes[-1].plot(np.asarray(scores), color="k", lw=1.0)
            axes[-1].set_ylabel("score")
            axes[-1].set_ylim(0, 1)
        axes[-1].set_xlabel("frame (s)")
        _save(fig, path)


def plot_summary(scores, selection, path, gt=None) -> None:
    scores = np.asarray(scores)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 2.4))
        x = np.arange(len(scores))
        ax.fill_between(x, 0, 1, where=selection.frame_mask, color="#ffbb78", step="mid", lw=0, label="selected")
        for b in selection.partition.boundaries:
            ax.axvline(b - 0.5, color="0.6", lw=0.6)
        ax.plot(x, scores, color="k", lw=1.0, label="predicted")
        if gt is not None:
            ax.plot(x, np.asarray(gt), color="#1f77b4", lw=0.8, ls="--", label="ground truth")
        ax.set_ylim(0, 1)
        ax.set_xlim(-0.5, len(scores) - 0.5)
        ax.set_xlabel("frame (s)")
        ax.set_ylabel("importance")
        ax.legend(loc="upper right", ncol=3, frameon=False)
        _save(fig, path)


def plot_report(report, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * len(report.videos) + 2), 2.8))
        ids = [v.id for v in report.videos]
        taus = [v.kendall_tau for v in report.videos]
        rhos = [v.spearman_rho for v in report.videos]
        x = np.arange(len(ids))
        ax.bar(x - 0.2, taus, width=0.4, label="Kendall tau")
        ax.bar(x + 0.2, rhos, width=0.4, label="Spearman rho")
        ax.axhline(0, color="k", lw=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90)
        ax.set_ylim(-1, 1)
        ax.legend(frameon=False)
        _save(fig, path)
