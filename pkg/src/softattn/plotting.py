"""Matplotlib figures written to files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import roc_curve  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_history(history: list[dict], path) -> Path:
    """Loss and accuracy curves per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("train_loss", "val_loss"):
        ax_loss.plot(epochs, [h[key] for h in history], label=key.split("_")[0])
    for key in ("train_acc", "val_acc"):
        ax_acc.plot(epochs, [h[key] for h in history], label=key.split("_")[0])
    ax_loss.set(xlabel="epoch", ylabel="cross-entropy")
    ax_acc.set(xlabel="epoch", ylabel="accuracy", ylim=(-0.02, 1.02))
    for ax in (ax_loss, ax_acc):
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_roc(scores: np.ndarray, labels: np.ndarray, class_names, path) -> Path:
    """One-vs-rest ROC curve per class that has both positives and negatives."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for c, name in enumerate(class_names):
        positive = labels == c
        if positive.all() or not positive.any():
            continue
        fpr, tpr = roc_curve(scores[:, c], positive)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], color="grey", linestyle=":")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_attention_panel(images, maps, overlays, titles, path) -> Path:
    """Columns per sample; rows are heatmap, overlay and the input image."""
    n = len(images)
    fig, axes = plt.subplots(3, n, figsize=(2.2 * n, 6.6), squeeze=False)
    for j in range(n):
        for i, img in enumerate((maps[j] / 255.0, overlays[j] / 255.0, images[j])):
            axes[i, j].imshow(np.clip(img, 0, 1))
            axes[i, j].axis("off")
        axes[0, j].set_title(titles[j], fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_gradcam_comparison(images, attention_maps, gradcam_maps, ious, titles, path) -> Path:
    """Per sample: input, soft-attention map and Grad-CAM map side by side."""
    n = len(images)
    fig, axes = plt.subplots(n, 3, figsize=(6.6, 2.2 * n), squeeze=False)
    for i in range(n):
        axes[i, 0].imshow(np.clip(images[i], 0, 1))
        axes[i, 1].imshow(attention_maps[i], cmap="jet")
        axes[i, 2].imshow(gradcam_maps[i], cmap="jet")
        axes[i, 0].set_title(titles[i], fontsize=7)
        axes[i, 1].set_title("soft attention", fontsize=7)
        axes[i, 2].set_title(f"Grad-CAM (IoU {ious[i]:.2f})", fontsize=7)
        for ax in axes[i]:
            ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)
