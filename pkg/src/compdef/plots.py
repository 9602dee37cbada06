"""Static figures: ASR bars, localization ROC curves and occlusion overlays."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402


def plot_asr(report, path):
    models = list(dict.fromkeys(c.model for c in report.cells))
    attacks = list(dict.fromkeys(c.attack for c in report.cells))
    width = 0.8 / max(1, len(attacks))
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(models), 3.2))
    x = np.arange(len(models))
    for j, a in enumerate(attacks):
        vals = []
        for m in models:
            try:
                v = report.cell(m, a).asr
            except KeyError:
                v = None
            vals.append(np.nan if v is None else v)
        ax.bar(x + (j - (len(attacks) - 1) / 2) * width, vals, width, label=a)
    ax.set_xticks(x, models, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("attack success rate")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_roc(curves: dict, path):
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    for name, roc in curves.items():
        ax.plot(roc.fpr, roc.tpr, label=f"{name} (AUC {roc.auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=7, frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def occlusion_overlay(image: np.ndarray, score_grid: np.ndarray, geometry, cmap: str = "inferno") -> np.ndarray:
    """Input image and its occlusion heat map side by side, shape (H, 2W, 3).

    Each pixel takes the largest score among the receptive fields covering
    it. Scores <= 0 (and uncovered pixels) are black; positive scores follow a
    colour ramp whose brightness increases monotonically.
    """
    painted = geometry.paint(np.asarray(score_grid, dtype=np.float64))
    pos = np.where(np.isfinite(painted) & (painted > 0), painted, 0.0)
    top = pos.max()
    level = pos / top if top > 0 else pos
    heat = colormaps[cmap](level)[..., :3]
    heat[level <= 0] = 0.0
    return np.concatenate([np.asarray(image, dtype=np.float64), heat], axis=1)
