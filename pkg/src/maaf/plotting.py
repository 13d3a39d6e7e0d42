"""Matplotlib figures for reports. Rendered off-screen with fixed metadata so bytes are reproducible."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synthetic_css import cell_of  # noqa: E402

_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_position_maps(maps: dict, path, title: str = "") -> Path:
    """3x3 panel of aggregated attention grids, laid out by the cell each word names."""
    fig, axes = plt.subplots(3, 3, figsize=(6, 6))
    for ax in axes.flat:
        ax.axis("off")
    for word, grid in maps.items():
        r, c = cell_of(word)
        ax = axes[r][c]
        ax.imshow(grid, cmap="gray", interpolation="nearest")
        ax.set_title(word, fontsize=9)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_word_map(grid: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(grid, cmap="gray", interpolation="nearest")
    ax.axis("off")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_recall_bars(rows: dict, path, ks=(1, 10, 50), title: str = "") -> Path:
    """Grouped bars of recall@k, one group per named run."""
    names = list(rows)
    x = np.arange(len(names))
    width = 0.8 / len(ks)
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names) + 2), 3.5))
    for i, k in enumerate(ks):
        ax.bar(x + i * width, [rows[n][k] for n in names], width, label=f"R{k}")
    ax.set_xticks(x + width * (len(ks) - 1) / 2)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("recall")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(history: list, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot([h["step"] for h in history], [h["loss"] for h in history])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
