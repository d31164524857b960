"""Figure rendering for spotting overlays, attention heatmaps, loss curves
and precision/recall reports."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def save_overlay(image: np.ndarray, spotted, path: str) -> None:
    """Draw detected shapes and transcriptions over the image."""
    fig, ax = plt.subplots(figsize=(image.shape[1] / 100, image.shape[0] / 100), dpi=100)
    ax.imshow(image)
    for sw in spotted:
        v = np.vstack([sw.shape.vertices, sw.shape.vertices[:1]])
        ax.plot(v[:, 0], v[:, 1], color="red", linewidth=1.5)
        ax.text(
            v[0, 0],
            v[0, 1] - 3,
            f"{sw.text} {sw.textness:.2f}/{sw.rec_score:.2f}",
            color="yellow",
            fontsize=8,
            backgroundcolor="black",
        )
    ax.axis("off")
    fig.savefig(path, bbox_inches="tight", pad_inches=0)
    plt.close(fig)


def attention_heatmap(trace) -> np.ndarray:
    """Sum attention grids across steps, normalized to [0, 1]."""
    if trace is None or len(trace.steps) == 0:
        return np.zeros((1, 1))
    total = None
    for step in trace.steps:
        a = step.alpha.detach().cpu().numpy() if hasattr(step.alpha, "detach") else np.asarray(step.alpha)
        total = a.copy() if total is None else total + a
    peak = total.max()
    return total / peak if peak > 0 else total


def save_attention_heatmaps(image: np.ndarray, spotted, path: str) -> None:
    """One heatmap panel per spotted word, resampled onto its box."""
    n = max(1, len(spotted))
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    for ax, sw in zip(axes[0], spotted):
        hm = attention_heatmap(sw.trace)
        ax.imshow(hm, cmap="hot", aspect="auto")
        ax.set_title(sw.text, fontsize=9)
        ax.axis("off")
    if not spotted:
        axes[0][0].axis("off")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def save_loss_curves(rows: list[dict], path: str) -> None:
    if not rows:
        return
    iters = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key in ("l_tpn_cls", "l_tpn_reg", "l_det_cls", "l_det_reg", "l_rec", "total"):
        if key in rows[0]:
            ax.plot(iters, [r[key] for r in rows], label=key, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def save_pr_report(summary: dict, path: str) -> None:
    """Bar chart of precision/recall/F per protocol."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = list(summary.keys())
    width = 0.25
    x = np.arange(len(labels))
    for k, (name, off) in enumerate((("precision", -width), ("recall", 0.0), ("f_measure", width))):
        vals = [summary[lb].get(name, 0.0) for lb in labels]
        ax.bar(x + off, vals, width=width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
