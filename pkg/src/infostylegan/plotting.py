"""Report figures written straight to files (matplotlib, Agg backend)."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def loss_curves(report, path, entropy: float = None, window: int = 20) -> None:
    """Moving averages of V, L_info and both losses against step."""
    steps = report.column("step")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    ax1.plot(steps, report.moving_average("v", window), label="V")
    ax1.plot(steps, report.moving_average("d_loss", window), label="D loss")
    ax1.plot(steps, report.moving_average("g_loss", window), label="G loss")
    ax1.set_xlabel("step")
    ax1.legend()
    ax2.plot(steps, report.column("linfo"), color="0.8", lw=0.6, label="L_info (batch)")
    ax2.plot(steps, report.moving_average("linfo", window), label=f"L_info ({window}-step mean)")
    if entropy is not None:
        ax2.axhline(entropy, color="k", ls="--", lw=1, label="H(C)")
    ax2.set_xlabel("step")
    ax2.legend()
    _save(fig, path)


def roc_plot(curves: Sequence, path) -> None:
    """``curves``: (label, fpr, tpr, auc); OCSVM dashed and LOF solid by method code suffix."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for label, fpr, tpr, auc in curves:
        ls = "--" if label.endswith("O") else "-"
        ax.plot(fpr, tpr, ls=ls, label=f"{label} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    _save(fig, path)


def lemma_limit_plot(points, path) -> None:
    eps = [p.eps for p in points]
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.plot(eps, [p.gap for p in points], "o-", label="I(C;X) - L_info(Q*)")
    ax.plot(eps, [p.expected_tc for p in points], "x--", label="E[TC(C|X)]")
    ax.plot(eps, [p.mutual_info for p in points], label="I(C;X)", color="0.5")
    ax.set_xlabel("mixing weight of the XOR channel")
    ax.set_ylabel("nats")
    ax.legend()
    _save(fig, path)


def mig_heatmap(report, path) -> None:
    fig, ax = plt.subplots(figsize=(1.2 + 0.7 * len(report.factor_names), 1.2 + 0.5 * len(report.attribute_names)))
    im = ax.imshow(report.mi / report.attribute_entropy[:, None], cmap="viridis", vmin=0.0)
    ax.set_xticks(np.arange(len(report.factor_names)), report.factor_names)
    ax.set_yticks(np.arange(len(report.attribute_names)), report.attribute_names)
    ax.set_title(f"I(V;C)/H(V), MIG {report.mig:.3f}")
    fig.colorbar(im, ax=ax)
    _save(fig, path)
