"""Figure rendering for the report paths; every plot goes straight to a file
next to the CSV it illustrates."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curve(history, path) -> None:
    steps = [r.step for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.total for r in history], label="total", lw=1.5)
    ax.plot(steps, [r.focal for r in history], label="focal", lw=0.9)
    ax.plot(steps, [r.l1 for r in history], label="l1", lw=0.9)
    ax.plot(steps, [r.giou for r in history], label="giou", lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cost_vs_k(rows, fits, path) -> None:
    """rows: BenchRow list; fits: {variant: (degree, r2)}."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    variants = sorted({r.variant for r in rows})
    for variant in variants:
        sub = [r for r in rows if r.variant == variant]
        ks = [r.k for r in sub]
        label = variant
        if variant in fits:
            deg, r2 = fits[variant]
            kind = {1: "linear", 2: "quadratic"}.get(deg, f"deg{deg}")
            label = f"{variant} ({kind} fit R2={r2:.4f})"
        axes[0].plot(ks, [r.flops / 1e6 for r in sub], marker="o", label=variant)
        axes[1].plot(ks, [r.wall_ns_mean / 1e6 for r in sub], marker="o",
                     label=label)
    axes[0].set_xlabel("templates k")
    axes[0].set_ylabel("analytic MFLOPs")
    axes[0].set_title("counted cost")
    axes[1].set_xlabel("templates k")
    axes[1].set_ylabel("wall time (ms)")
    axes[1].set_title("measured cost")
    for ax in axes:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_success_curves(overlap_lists, path, labels=None) -> None:
    """Success rate vs IoU threshold, one curve per sequence plus the mean."""
    taus = np.linspace(0, 1, 101)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    all_overlaps = []
    for i, overlaps in enumerate(overlap_lists):
        ov = np.asarray(overlaps)
        all_overlaps.append(ov)
        curve = [(ov > t).mean() for t in taus]
        label = labels[i] if labels else None
        ax.plot(taus, curve, lw=0.8, alpha=0.45, label=label)
    merged = np.concatenate(all_overlaps)
    ax.plot(taus, [(merged > t).mean() for t in taus], lw=2.2, color="black",
            label="all frames")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("success rate")
    ax.set_title("success curves")
    if labels or len(overlap_lists) <= 8:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
