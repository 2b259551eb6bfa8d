"""Report figures written next to the text artifacts.

PNG metadata is stripped so identical inputs give byte-identical files.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tavce._io import atomic_write_bytes  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "tavce",
}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def _smooth(y: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(y) < width:
        return y
    kernel = np.ones(width) / width
    return np.convolve(y, kernel, mode="valid")


def loss_curve(records, path, title: str = "training loss") -> Path:
    it = np.array([r.iteration for r in records])
    total = np.array([r.total for r in records])
    width = max(1, len(records) // 50)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(it, total, color="0.8", lw=0.6, label="total (raw)")
        sm = _smooth(total, width)
        ax.plot(it[len(it) - len(sm):], sm, color="C0", lw=1.2, label=f"total ({width}-step mean)")
        render = np.array([r.render for r in records])
        reg = np.array([r.reg for r in records])
        if render.any():
            ax.plot(it, render, color="C1", lw=0.8, label="render")
        if reg.any():
            ax.plot(it, reg, color="C2", lw=0.8, label="reg")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def cosine_histogram(pos: np.ndarray, neg: np.ndarray, path) -> Path:
    bins = np.linspace(-1, 1, 41)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.hist(neg, bins=bins, density=True, alpha=0.6, color="C3", label=f"non-adjacent (mean {neg.mean():.3f})")
        ax.hist(pos, bins=bins, density=True, alpha=0.6, color="C0", label=f"adjacent (mean {pos.mean():.3f})")
        ax.set_xlabel("cosine(audio correlation, visual correlation)")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def ablation_bars(labels: Sequence[str], mse: Sequence[float], consistency: Sequence[float], path) -> Path:
    x = np.arange(len(labels))
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        a1.bar(x, mse, color="C0")
        a1.set_ylabel("held-out MSE")
        a2.bar(x, consistency, color="C2")
        a2.set_ylabel("temporal consistency")
        for ax in (a1, a2):
            ax.set_xticks(x, labels, rotation=20, ha="right")
        fig.tight_layout()
        return _save(fig, path)


def frame_strip(real: np.ndarray, generated: np.ndarray, path, count: int = 6) -> Path:
    """Top row real frames, bottom row regenerated frames."""
    count = min(count, len(real))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, count, figsize=(1.2 * count, 2.6), squeeze=False)
        for k in range(count):
            for row, img in enumerate((real[k], generated[k])):
                ax = axes[row][k]
                ax.imshow(img.reshape(img.shape[-2:]), cmap="gray", vmin=0, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0][0].set_ylabel("real")
        axes[1][0].set_ylabel("generated")
        fig.tight_layout()
        return _save(fig, path)
