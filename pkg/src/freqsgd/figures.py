"""Static figure rendering for run reports.

Figures are written as PNG files next to the delimited outputs they
visualize. Metadata that varies between renders (timestamps, tool version)
is stripped so identical inputs give byte-identical files.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def render_curves(records, path) -> None:
    """Training loss and validation AUC against epochs, twin axes."""
    epochs = [r.epoch for r in records]
    fig, ax_loss = plt.subplots(figsize=(6.0, 4.0))
    ax_loss.plot(epochs, [r.train_loss for r in records], "o-", color="tab:blue",
                 label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:blue")
    ax_auc = ax_loss.twinx()
    ax_auc.plot(epochs, [r.val_auc for r in records], "s-", color="tab:red",
                label="validation AUC")
    ax_auc.set_ylabel("validation AUC", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_token_scatter(tokens, path) -> None:
    """Adaptive-accumulator row sums against token frequencies, log-log."""
    p_hat = np.array([t["p_hat"] for t in tokens])
    acc = np.array([t["accumulator_sum"] for t in tokens])
    grad = np.array([t["grad_norm_sq"] for t in tokens])
    fig, (ax_a, ax_g) = plt.subplots(1, 2, figsize=(9.0, 4.0))
    seen = p_hat > 0
    if np.any(acc > 0):
        ax_a.scatter(p_hat[seen], acc[seen], s=8, alpha=0.5, color="tab:purple")
        ax_a.set_xscale("log")
        ax_a.set_yscale("log")
    ax_a.set_xlabel("empirical token frequency")
    ax_a.set_ylabel("second-moment row sum")
    pos = seen & (grad > 0)
    if np.any(pos):
        ax_g.scatter(p_hat[pos], grad[pos], s=8, alpha=0.5, color="tab:green")
        ax_g.set_xscale("log")
        ax_g.set_yscale("log")
    ax_g.set_xlabel("empirical token frequency")
    ax_g.set_ylabel("squared gradient norm")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_gamma(ranks, gamma, path) -> None:
    """Per-token rate-bound improvement ratio by frequency rank."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(ranks, gamma, ".-", color="tab:orange")
    ax.set_yscale("log")
    ax.set_xlabel("token rank by frequency")
    ax.set_ylabel("rate-bound ratio vs plain SGD")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
