"""Matplotlib renderings written next to the delimited report files.

The CSV files are the authoritative outputs; these figures are a reading
aid: training curves, a radar chart over the evaluation axes, an ablation
bar chart, and qualitative frame panels.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataio import DYNAMIC_OBSTACLE, IGNORE, SKY, STATIC_OBSTACLE, WATER
from .evaluation import RADAR_AXES

LABEL_COLORS = {
    SKY: (0.0, 0.85, 0.85),
    STATIC_OBSTACLE: (0.1, 0.7, 0.2),
    WATER: (0.15, 0.3, 0.9),
    DYNAMIC_OBSTACLE: (0.9, 0.15, 0.1),
    IGNORE: (0.5, 0.5, 0.5),
}


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    out = np.zeros(labels.shape + (3,))
    for cls, color in LABEL_COLORS.items():
        out[labels == cls] = color
    return out


def save_training_curves(log_rows: list[dict], path: Path) -> None:
    epochs = [r["epoch"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "l_f", "l_s"):
        ax1.plot(epochs, [r[key] for r in log_rows], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.set_title("training loss")
    ax2.plot(epochs, [r["val_miou"] for r in log_rows], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val mIoU")
    ax2.set_ylim(0, 1)
    ax2.set_title("validation mIoU")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_radar_chart(series: dict[str, dict[str, float]], path: Path) -> None:
    """One polygon per labelled run over the shared evaluation axes."""
    axes = list(RADAR_AXES)
    angles = np.linspace(0, 2 * np.pi, len(axes), endpoint=False).tolist()
    angles += angles[:1]
    fig, ax = plt.subplots(figsize=(6, 6), subplot_kw={"projection": "polar"})
    for label, values in series.items():
        vals = [values.get(a, float("nan")) for a in axes]
        vals += vals[:1]
        ax.plot(angles, vals, label=label)
        ax.fill(angles, vals, alpha=0.08)
    ax.set_xticks(angles[:-1])
    ax.set_xticklabels(axes, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper right", bbox_to_anchor=(1.25, 1.1), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(rows: dict[str, float], path: Path) -> None:
    labels = list(rows)
    values = [rows[k] for k in labels]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.set_title("modality subsets")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_frame_panel(bundle, pred: np.ndarray | None, path: Path) -> None:
    """RGB, thermal, lidar, ground truth, and (optionally) the prediction."""
    panels = [("rgb", bundle.rgb), ("thermal", bundle.thermal),
              ("lidar", bundle.lidar), ("labels", colorize_labels(bundle.labels))]
    if pred is not None:
        panels.append(("prediction", colorize_labels(pred)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        if img.ndim == 2:
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        else:
            ax.imshow(img)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
