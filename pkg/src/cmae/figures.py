"""Matplotlib renderings saved next to each report's CSV output."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(metrics_csv, path):
    steps, losses, lrs = [], [], []
    with open(metrics_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            lrs.append(float(row["lr"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("masked MSE")
    ax.set_title("pretraining loss")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:orange", lw=0.8, alpha=0.6)
    ax2.set_ylabel("lr", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_bars(stats, path):
    """stats: dict normalization -> AttentionStats."""
    fig, axes = plt.subplots(1, len(stats), figsize=(4 * len(stats), 3.2))
    if len(stats) == 1:
        axes = [axes]
    for ax, (norm, s) in zip(axes, stats.items()):
        ax.bar(["to mask", "to visible"], [s.mean_mask_to_mask, s.mean_mask_to_visible], color=["tab:gray", "tab:blue"])
        ax.set_title(f"{norm}\n({s.images_seen} images)")
    fig.suptitle("mask-token attention by target group")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_flops_bars(reports, path):
    """reports: dict label -> FlopsReport."""
    comps = ["decoder_attention", "decoder_mlp", "head", "interblock_fusion"]
    labels = list(reports)
    fig, ax = plt.subplots(figsize=(6, 4))
    bottoms = np.zeros(len(labels))
    for comp in comps:
        vals = np.array([getattr(reports[k], comp) for k in labels], dtype=float) / 1e9
        ax.bar(labels, vals, bottom=bottoms, label=comp)
        bottoms += vals
    ax.set_ylabel("decoder GFLOPs / image")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_decomposition_montage(stack, path):
    levels = list(stack.levels()) + [("sum", stack.total)]
    cols = len(levels)
    fig, axes = plt.subplots(1, cols, figsize=(1.6 * cols, 2.0))
    for ax, (name, img) in zip(np.atleast_1d(axes), levels):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(name, fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def save_weight_heatmap(mag, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    im = ax.imshow(mag, cmap="gray", aspect="auto")
    ax.set_xlabel("encoder map index")
    ax.set_ylabel("decoder block")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title("fusion weight magnitude")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_reconstruction_panel(rows, path, col_titles=("original", "masked", "reconstruction")):
    """rows: list of (original, masked, recon) image triples."""
    n = len(rows)
    fig, axes = plt.subplots(n, 3, figsize=(5.4, 1.9 * n), squeeze=False)
    for r, triple in enumerate(rows):
        for c, img in enumerate(triple):
            axes[r][c].imshow(np.clip(img, 0, 1))
            axes[r][c].axis("off")
            if r == 0:
                axes[r][c].set_title(col_titles[c], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
