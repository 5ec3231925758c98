"""Figures written next to the delimited outputs (ROC, loss curves, profiles)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluate import RocCurve  # noqa: E402
from .profile import DEFAULT_CHANNELS, SuperImage  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(roc: RocCurve, path: str | Path, title: str = "ROC") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(roc.fpr, roc.tpr, drawstyle="default", label=f"AUC = {roc.auc:.4f}")
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.01), title=title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(rows: Sequence[dict], path: str | Path) -> Path:
    """``rows`` carry step, xent, consistency, contrastive (as in loss.csv)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in rows]
    for key in ("xent", "consistency", "contrastive"):
        ax.plot(steps, [r[key] for r in rows], label=key, lw=1)
    ax.set(xlabel="step", ylabel="loss", yscale="symlog")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_super_image(image: SuperImage, path: str | Path) -> Path:
    """All seven channels with their bounding boxes, y axis pointing up."""
    fig, axes = plt.subplots(1, len(DEFAULT_CHANNELS), figsize=(2.2 * len(DEFAULT_CHANNELS), 2.6))
    for ax, spec in zip(axes, DEFAULT_CHANNELS):
        ax.imshow(image.channels[spec.index], origin="lower", cmap="gray", vmin=0, vmax=1)
        x0, y0, x1, y1 = image.bboxes[spec.index]
        ax.add_patch(Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0 + 1, y1 - y0 + 1, fill=False, ec="red", lw=1))
        ax.set_title(f"{spec.y_feature}\nvs {spec.x_feature}", fontsize=7)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"{image.key} ({image.label.value})", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
