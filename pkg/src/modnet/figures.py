"""Matplotlib renderers for the report figures, written next to the CSVs.

Backend is forced to Agg so report generation works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def ablation_heatmap(report, path) -> None:
    """Two stacked cluster x label accuracy panels: clusters ON, clusters OFF."""
    k, c = report.on.shape
    fig, axes = plt.subplots(2, 1, figsize=(0.8 * c + 2, 0.8 * k + 2), sharex=True)
    for ax, table, title in ((axes[0], report.on, "cluster ON"),
                             (axes[1], report.off, "cluster OFF")):
        im = ax.imshow(table, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
        ax.set_title(title)
        ax.set_ylabel("cluster")
        ax.set_yticks(range(k))
        for i in range(k):
            for j in range(c):
                ax.text(j, i, f"{table[i, j]:.2f}", ha="center", va="center",
                        color="white" if table[i, j] < 0.6 else "black", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.025)
    axes[1].set_xlabel("label")
    axes[1].set_xticks(range(c))
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def weight_matrix_figure(weight_io, assignment, path) -> None:
    """The clustered layer with rows/columns permuted to group the clusters.

    Signed colormap: red for negative weights, blue for positive; black lines
    mark cluster boundaries.
    """
    w = np.asarray(weight_io)
    row_order = np.argsort(assignment.u_labels, kind="stable")
    col_order = np.argsort(assignment.v_labels, kind="stable")
    permuted = w[row_order][:, col_order]
    limit = np.abs(w).max() or 1.0

    fig, ax = plt.subplots(figsize=(6, 6))
    im = ax.imshow(permuted, cmap="RdBu", vmin=-limit, vmax=limit)
    row_labels = assignment.u_labels[row_order]
    col_labels = assignment.v_labels[col_order]
    for b in np.flatnonzero(np.diff(row_labels)) + 1:
        ax.axhline(b - 0.5, color="black", linewidth=0.8)
    for b in np.flatnonzero(np.diff(col_labels)) + 1:
        ax.axvline(b - 0.5, color="black", linewidth=0.8)
    ax.set_xlabel("output neurons (grouped by cluster)")
    ax.set_ylabel("input neurons (grouped by cluster)")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def ksweep_figure(ks, es, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(ks), list(es), marker="o")
    ax.set_xlabel("number of clusters k")
    ax.set_ylabel("enmeshment E")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curves(stats, path) -> None:
    epochs = [s.epoch for s in stats]
    fig, ax_loss = plt.subplots(figsize=(6, 4))
    ax_loss.plot(epochs, [s.loss for s in stats], color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [s.test_accuracy for s in stats], color="tab:blue",
                label="test accuracy")
    e_points = [(s.epoch, s.enmeshment) for s in stats if s.enmeshment is not None]
    if e_points:
        ax_acc.plot([p[0] for p in e_points], [p[1] for p in e_points],
                    color="tab:green", linestyle="--", label="enmeshment")
    ax_acc.set_ylabel("accuracy / enmeshment")
    ax_acc.set_ylim(0.0, 1.05)
    lines, labels = ax_loss.get_legend_handles_labels()
    lines2, labels2 = ax_acc.get_legend_handles_labels()
    ax_acc.legend(lines + lines2, labels + labels2, loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
