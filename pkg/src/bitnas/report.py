"""Figure rendering for finished runs.

Reads the CSV/JSON artifacts a search run leaves behind and writes PNG
figures next to them: training curves, the per-block candidate
probabilities over time, and accuracy against compression for the
sampled architectures.
"""

from __future__ import annotations

import csv
import os
from typing import List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def metrics_figure(rows: List[dict], path) -> None:
    """Loss, cross entropy, expected cost, and temperature across epochs."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    panels = (("loss", "total loss"), ("ce", "cross entropy"),
              ("cost", "expected cost"), ("tau", "temperature"))
    for ax, (col, title) in zip(axes.flat, panels):
        for phase, style in (("weights", "-"), ("theta", "--")):
            pts = [(int(r["epoch"]), float(r[col]))
                   for r in rows if r["phase"] == phase]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, style, label=phase)
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def theta_figure(rows: List[dict], path) -> None:
    """Softmax of theta per block, one panel per block, lines per candidate."""
    blocks = []
    for r in rows:
        if r["block"] not in blocks:
            blocks.append(r["block"])
    ncols = min(3, len(blocks))
    nrows = (len(blocks) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows),
                             squeeze=False)
    for ax in axes.flat[len(blocks):]:
        ax.axis("off")
    for bi, block in enumerate(blocks):
        ax = axes.flat[bi]
        sub = [r for r in rows if r["block"] == block]
        epochs = [int(r["epoch"]) for r in sub]
        theta = np.array([[float(v) for k, v in r.items()
                           if k.startswith("theta") and v != ""]
                          for r in sub])
        z = theta - theta.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        for k in range(p.shape[1]):
            ax.plot(epochs, p[:, k], label=f"c{k}")
        ax.set_title(f"block {block}", fontsize=9)
        ax.set_ylim(0, 1)
        ax.set_xlabel("epoch", fontsize=8)
        if p.shape[1] <= 6:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def accuracy_compression_figure(rows: List[dict], path) -> bool:
    """Scatter of trained children: compression vs accuracy, colored by the
    epoch they were sampled at.  Returns False when no row has an accuracy."""
    pts = [(float(r["compression"]), float(r["test_accuracy"]),
            int(r["epoch_sampled"]))
           for r in rows
           if r["test_accuracy"] not in ("", "failed")]
    if not pts:
        return False
    comp, acc, epoch = zip(*pts)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    sc = ax.scatter(comp, acc, c=epoch, cmap="viridis", s=42)
    fig.colorbar(sc, ax=ax, label="epoch sampled")
    ax.set_xlabel("compression rate")
    ax.set_ylabel("test accuracy")
    ax.set_title("sampled architectures")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return True


def render_run(run_dir, out_dir=None) -> List[str]:
    """Render every figure the run's artifacts support; returns paths."""
    run_dir = os.fspath(run_dir)
    out_dir = os.path.join(run_dir, "figures") if out_dir is None \
        else os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    metrics = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(metrics):
        p = os.path.join(out_dir, "metrics.png")
        metrics_figure(_read_csv(metrics), p)
        written.append(p)

    history = os.path.join(run_dir, "theta_history.csv")
    if os.path.exists(history):
        p = os.path.join(out_dir, "theta.png")
        theta_figure(_read_csv(history), p)
        written.append(p)

    results = os.path.join(run_dir, "results.csv")
    if os.path.exists(results):
        p = os.path.join(out_dir, "accuracy_compression.png")
        if accuracy_compression_figure(_read_csv(results), p):
            written.append(p)

    if not written:
        raise FileNotFoundError(f"no renderable artifacts under {run_dir}")
    return written
