"""PNG figures for augmented samples, fields and predictions."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import predict_volume  # noqa: E402


def _labels(y):
    # (N, C, H, W) one-hot -> (N, H, W) indices
    return np.asarray(y).argmax(1)


def save_sample_grid(path, x, y, title="", n=8):
    n = min(n, len(x))
    fig, axes = plt.subplots(2, n, figsize=(1.8 * n, 3.8), squeeze=False)
    lab = _labels(y)
    for i in range(n):
        axes[0, i].imshow(x[i, 0], cmap="gray")
        axes[1, i].imshow(lab[i], cmap="viridis", vmin=0, vmax=max(1, y.shape[1] - 1))
        for ax in axes[:, i]:
            ax.axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def save_field_panel(path, images, field, kind):
    """Per-row: image, field magnitude (or intensity map) and a quiver overlay."""
    n = len(images)
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.5 * n), squeeze=False)
    for i in range(n):
        img = images[i, 0]
        axes[i, 0].imshow(img, cmap="gray")
        if kind == "deform":
            v = field[i]
            mag = np.hypot(v[0], v[1])
            im = axes[i, 1].imshow(mag, cmap="magma")
            step = max(1, img.shape[0] // 16)
            yy, xx = np.mgrid[0:img.shape[0]:step, 0:img.shape[1]:step]
            axes[i, 2].imshow(img, cmap="gray")
            axes[i, 2].quiver(xx, yy, v[1, ::step, ::step], -v[0, ::step, ::step],
                              color="yellow", angles="xy")
        else:
            im = axes[i, 1].imshow(field[i, 0], cmap="coolwarm", vmin=-1, vmax=1)
            axes[i, 2].imshow(img + field[i, 0], cmap="gray")
        fig.colorbar(im, ax=axes[i, 1], fraction=0.046)
        for ax in axes[i]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def save_prediction_panel(path, model, pairs, slices=3):
    rows = []
    for img, lab in pairs:
        pred = predict_volume(model, img.voxels)
        for k in np.linspace(0, img.num_slices - 1, slices).astype(int):
            rows.append((img.voxels[..., k], lab.labels[..., k], pred[..., k], lab.num_classes))
    fig, axes = plt.subplots(len(rows), 3, figsize=(7.5, 2.5 * len(rows)), squeeze=False)
    for ax_row, (im, gt, pr, c) in zip(axes, rows):
        ax_row[0].imshow(im, cmap="gray")
        ax_row[1].imshow(gt, cmap="viridis", vmin=0, vmax=c - 1)
        ax_row[2].imshow(pr, cmap="viridis", vmin=0, vmax=c - 1)
        for ax in ax_row:
            ax.axis("off")
    axes[0, 1].set_title("ground truth")
    axes[0, 2].set_title("prediction")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
