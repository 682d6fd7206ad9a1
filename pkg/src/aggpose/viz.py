"""Figure rendering for the CLI report paths.

Every function writes a PNG next to the delimited report it illustrates.
Rendering is headless (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import RECALL_THRESHOLDS


def save_loss_curve(log_rows, path) -> None:
    steps = [r[0] for r in log_rows]
    losses = [r[1] for r in log_rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    evals = [(r[0], r[3]) for r in log_rows if r[3] is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot([e[0] for e in evals], [e[1] for e in evals], "o-", color="tab:orange", ms=3)
        ax2.set_ylabel("eval AP", color="tab:orange")
        ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_pr_curves(result, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    for thr, curve in sorted(result.precision_curves.items()):
        ax.plot(RECALL_THRESHOLDS, curve, lw=1.2, label=f"OKS {thr:.2f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    ax.set_title(f"AP {result.ap:.3f}  AR {result.ar:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_keypoint_overlay(image, keypoints, path, heatmaps=None, skeleton=None) -> None:
    """Image with predicted keypoints; optionally blends the summed
    heatmap response underneath."""
    fig, ax = plt.subplots(figsize=(5, 5 * image.shape[0] / max(image.shape[1], 1)))
    ax.imshow(image)
    if heatmaps is not None:
        summed = np.asarray(heatmaps).max(axis=0)
        hm_h, hm_w = summed.shape
        ax.imshow(
            summed,
            cmap="inferno",
            alpha=0.45,
            extent=(-0.5, image.shape[1] - 0.5, image.shape[0] - 0.5, -0.5),
            interpolation="bilinear",
        )
    pts = np.asarray(keypoints)
    ax.scatter(pts[:, 0], pts[:, 1], s=14, c="lime", edgecolors="black", linewidths=0.4)
    if skeleton:
        for a, b in skeleton:
            ax.plot([pts[a, 0], pts[b, 0]], [pts[a, 1], pts[b, 1]], c="lime", lw=0.8, alpha=0.7)
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_chart(shares, path) -> None:
    """Horizontal bar chart of per-block forward time shares (percent)."""
    names = list(shares)
    values = [shares[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(names) + 1.5))
    ax.barh(names, values, color="tab:blue")
    ax.set_xlabel("share of forward time (%)")
    for i, v in enumerate(values):
        ax.text(v + 0.5, i, f"{v:.1f}%", va="center", fontsize=8)
    ax.set_xlim(0, max(values) * 1.2 + 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gradcheck_chart(results, path) -> None:
    names = [r.name for r in results]
    errs = [max(r.worst, 1e-16) for r in results]
    tols = [r.tolerance for r in results]
    fig, ax = plt.subplots(figsize=(7, 0.4 * len(names) + 1.5))
    colors = ["tab:green" if r.passed else "tab:red" for r in results]
    ax.barh(names, errs, color=colors)
    for name, tol, y in zip(names, tols, range(len(names))):
        ax.plot([tol, tol], [y - 0.4, y + 0.4], color="black", lw=1.0)
    ax.set_xscale("log")
    ax.set_xlabel("worst relative error (bar) vs tolerance (tick)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
