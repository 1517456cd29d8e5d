"""Diagnostic figures: loss curves, WCSS elbows, reconstruction grids, scatter."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import atomic_write_bytes
from .clustering import PcaModel

# stripped Software tag keeps PNG bytes identical across matplotlib reruns
_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_META, dpi=110)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss_curves(history: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [row["epoch"] for row in history]
    for key in ("reconstruction", "codebook", "commitment", "total"):
        ax.plot(epochs, [row[key] for row in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_wcss_curve(curve: list[tuple[int, float]], chosen_k: int | None, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ks = [k for k, _ in curve]
    ws = [w for _, w in curve]
    ax.plot(ks, ws, marker="o")
    if chosen_k is not None:
        ax.axvline(chosen_k, color="tab:red", linestyle="--", label=f"k = {chosen_k}")
        ax.legend()
    ax.set_xlabel("k")
    ax.set_ylabel("WCSS")
    fig.tight_layout()
    _save(fig, path)


def plot_reconstruction_grid(originals: np.ndarray, reconstructions: np.ndarray,
                             path: str | Path, max_items: int = 8) -> None:
    """Originals on the top row, reconstructions below, widest channel shown."""
    n = min(originals.shape[0], max_items)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for i in range(n):
        axes[0][i].imshow(originals[i, 0], cmap="gray", vmin=0, vmax=1)
        axes[1][i].imshow(reconstructions[i, 0], cmap="gray", vmin=0, vmax=1)
        for row in (0, 1):
            axes[row][i].set_xticks([])
            axes[row][i].set_yticks([])
    axes[0][0].set_ylabel("input")
    axes[1][0].set_ylabel("recon")
    fig.tight_layout()
    _save(fig, path)


def plot_latent_scatter(vectors: np.ndarray, labels: np.ndarray, path: str | Path,
                        title: str = "latents") -> None:
    """2-D PCA projection of embedding rows, colored by cluster."""
    if vectors.shape[1] > 2:
        pca = PcaModel.fit(vectors, 2)
        pts = pca.transform(vectors)
    else:
        pts = vectors.astype(np.float64)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for j in sorted(set(int(v) for v in labels)):
        sel = labels == j
        ax.scatter(pts[sel, 0], pts[sel, 1], s=12, label=f"cluster {j}")
    ax.set_title(title)
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
