"""Figures written next to CSV outputs: training curves and subset-grid heatmaps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import METRIC_COLUMNS, SubsetResultGrid  # noqa: E402

_PANELS = (("Dice (%)", "dice_", "viridis"), ("HD95 (mm)", "hd95_", "magma_r"),
           ("PSNR (dB)", "psnr_", "cividis"))


def plot_loss_curve(rows: list[dict], path) -> Path:
    """Total loss and its components against step, one line each."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if rows:
        steps = np.array([r["step"] for r in rows])
        for key in ("loss", "dice_loss", "rec_loss"):
            ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.2)
        boundaries = [r["step"] for a, r in zip(rows, rows[1:]) if r["phase"] != a["phase"]]
        for b in boundaries:
            ax.axvline(b - 0.5, color="grey", linestyle=":", linewidth=1)
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_grid_heatmap(grid: SubsetResultGrid, path) -> Path:
    """Three heatmaps (Dice, HD95, PSNR) with one row per modality subset."""
    path = Path(path)
    labels = ["+".join(s.names) for s in grid.subsets]
    fig, axes = plt.subplots(1, len(_PANELS), figsize=(13, 6.5))
    for ax, (title, prefix, cmap) in zip(axes, _PANELS):
        cols = [i for i, name in enumerate(METRIC_COLUMNS) if name.startswith(prefix)]
        values = grid.rows[:, cols]
        im = ax.imshow(values, aspect="auto", cmap=cmap)
        ax.set_xticks(range(len(cols)), [METRIC_COLUMNS[i][len(prefix):] for i in cols])
        ax.set_yticks(range(len(labels)), labels if ax is axes[0] else [""] * len(labels))
        for (r, c), v in np.ndenumerate(values):
            shade = im.cmap(im.norm(v))
            dark = 0.299 * shade[0] + 0.587 * shade[1] + 0.114 * shade[2] < 0.5
            ax.text(c, r, f"{v:.1f}", ha="center", va="center", fontsize=7,
                    color="white" if dark else "black")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
