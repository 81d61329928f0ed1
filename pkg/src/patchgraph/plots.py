"""Figure rendering for the CLI report paths.

Every CSV/JSON report the CLI writes gets a PNG next to it; all functions
take data plus an output path and save headlessly.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_loss_curves",
    "plot_probe_results",
    "plot_embedding_scatter",
    "plot_heatmap_slices",
]


def plot_loss_curves(rows, path) -> None:
    """rows: (step, lr, loss_patch, loss_graph, loss_total) tuples."""
    rows = list(rows)
    steps = [r[0] for r in rows]
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(steps, [r[2] for r in rows], label="patch level", alpha=0.8)
    ax_loss.plot(steps, [r[3] for r in rows], label="graph level", alpha=0.8)
    ax_loss.plot(steps, [r[4] for r in rows], label="combined", lw=2)
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_lr.plot(steps, [r[1] for r in rows], color="tab:red")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_probe_results(results, path) -> None:
    """results: iterable of ProbeResult."""
    results = list(results)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(results)), 4))
    xs = np.arange(len(results))
    means = [r.mean for r in results]
    stds = [r.std for r in results]
    ax.bar(xs, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{r.task}\n({r.metric})" for r in results])
    ax.set_ylabel("5-fold mean")
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_embedding_scatter(coords2d, labels, path, label_name="label") -> None:
    coords2d = np.asarray(coords2d)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    labels = list(labels)
    classes = sorted(set(labels), key=str)
    for cls in classes:
        sel = np.array([lab == cls for lab in labels])
        ax.scatter(coords2d[sel, 0], coords2d[sel, 1], s=18, alpha=0.75, label=str(cls))
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(title=label_name, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_heatmap_slices(volume, overlay, path, axial_index=None) -> None:
    """Axial slice of the image, the activation map, and their blend."""
    img = volume.data
    heat = overlay.data
    z = img.shape[0] // 2 if axial_index is None else int(axial_index)
    fig, axes = plt.subplots(1, 3, figsize=(11, 4))
    axes[0].imshow(img[z], cmap="gray")
    axes[0].set_title("image")
    im = axes[1].imshow(heat[z], cmap="inferno", vmin=0, vmax=1)
    axes[1].set_title("region activation")
    axes[2].imshow(img[z], cmap="gray")
    axes[2].imshow(heat[z], cmap="inferno", vmin=0, vmax=1, alpha=0.45)
    axes[2].set_title("overlay")
    for ax in axes:
        ax.axis("off")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.suptitle(f"axial slice z={z}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
