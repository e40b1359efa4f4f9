"""Figure rendering for the bench and analysis reports.

All figures go straight to files (Agg backend, SVG by default) next to the
delimited output; dates and hash salts are pinned so reruns produce stable
documents.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams["svg.hashsalt"] = "hypersteer"

_SAVE_KW = {"metadata": {"Date": None}}


def render_samples_overlay(path, samples_by_cond: dict, target, title: str) -> None:
    """Scatter of samples over the target density contours, one panel total."""
    fig, ax = plt.subplots(figsize=(5, 5))
    centers = target.grid.centers()
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    dens = sum(target.density(c) for c in target.conditions)
    ax.contour(xx, yy, dens, levels=8, cmap="Greys", linewidths=0.8)
    cmap = plt.get_cmap("tab10")
    for c, xs in sorted(samples_by_cond.items()):
        ax.scatter(xs[:, 0], xs[:, 1], s=4, alpha=0.35, color=cmap(c % 10), label=f"cond {c}")
    ax.set_title(title)
    ax.set_xlim(target.grid.lo, target.grid.hi)
    ax.set_ylim(target.grid.lo, target.grid.hi)
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=7, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_drift(path, report) -> None:
    """Cosine similarity and relative L1 change across sampling steps."""
    fig, ax1 = plt.subplots(figsize=(6, 4))
    steps = report.steps
    ax1.plot(steps, report.cosine, color="tab:blue", label="cosine similarity")
    ax1.set_xlabel("step (noise → data)")
    ax1.set_ylabel("cosine to starting-step adapter", color="tab:blue")
    ax1.invert_xaxis()
    ax2 = ax1.twinx()
    ax2.plot(steps, report.l1_change, color="tab:red", label="relative L1 change")
    ax2.set_ylabel("relative L1 change", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_pca(path, pca_by_step: dict) -> None:
    """Top-2 principal coordinates of emitted adapters, one panel per step."""
    steps = sorted(pca_by_step, reverse=True)
    ncols = min(4, len(steps))
    nrows = (len(steps) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3 * ncols, 3 * nrows), squeeze=False)
    for ax, step in zip(axes.ravel(), steps):
        info = pca_by_step[step]
        ax.scatter(info["coords"][:, 0], info["coords"][:, 1], s=6, alpha=0.6)
        ev = info["explained"]
        ax.set_title(f"step {step} (ev {ev[0]:.2f}/{ev[1]:.2f})", fontsize=9)
    for ax in axes.ravel()[len(steps):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_loss_curve(path, curve) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if any(v is not None for v in curve.loss_reward):
        ax.plot(curve.iters, curve.loss_reward, label="reward loss")
    if any(v is not None for v in curve.loss_reg):
        ax.plot(curve.iters, curve.loss_reg, label="regularization loss")
    ax.plot(curve.iters, curve.mean_reward, label="mean reward", linestyle="--")
    ax.set_xlabel("iteration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
