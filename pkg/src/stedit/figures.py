"""Matplotlib figure rendering for reports and demos (Agg backend)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curve(metrics_csv: str, out_path: str):
    steps, losses = [], []
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8, alpha=0.5, label="loss")
    if len(losses) >= 20:
        k = max(1, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, lw=1.5, label=f"smoothed (k={k})")
    ax.set_xlabel("step")
    ax.set_ylabel("mse loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_image_grid(rows: list, out_path: str, col_titles: list | None = None,
                    row_titles: list | None = None, scale: float = 1.6):
    """rows: list of lists of uint8 HxWx3 images; one subplot per image."""
    nr = len(rows)
    nc = max(len(r) for r in rows)
    fig, axes = plt.subplots(nr, nc, figsize=(nc * scale, nr * scale * 0.6),
                             squeeze=False)
    for i, row in enumerate(rows):
        for j in range(nc):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(row) and row[j] is not None:
                ax.imshow(row[j], interpolation="nearest")
            if i == 0 and col_titles and j < len(col_titles):
                ax.set_title(col_titles[j], fontsize=7)
        if row_titles and i < len(row_titles):
            axes[i][0].set_ylabel(row_titles[i], fontsize=7)
            axes[i][0].axis("on")
            axes[i][0].set_xticks([])
            axes[i][0].set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def save_eval_grid(images: list, records: list, out_path: str, max_rows: int = 12):
    """Side-by-side (ground truth | masked | generated) with predictions."""
    rows, titles = [], []
    for img, rec in zip(images[:max_rows], records[:max_rows]):
        rows.append([rec["_gt"], rec["_masked"], img])
        titles.append(f"target={rec['target_text']} pred={rec.get('_pred', '?')}")
    fig, axes = plt.subplots(len(rows), 3, figsize=(6, 1.1 * len(rows)),
                             squeeze=False)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            axes[i][j].imshow(img, interpolation="nearest")
            axes[i][j].axis("off")
        axes[i][1].set_title(titles[i], fontsize=6)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
