"""Figure rendering for report CSVs.

Each report command can render a PNG next to its delimited output; the CSVs
remain the canonical artefacts and regenerate the figures at any time.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curves(log_rows: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = np.arange(1, len(log_rows) + 1)
    for key, style in (("L", "-k"), ("L_cls", "--b"), ("L_sem", "--r")):
        vals = np.array([row[key] for row in log_rows], dtype=float)
        if np.isfinite(vals).any():
            ax1.plot(epochs, vals, style, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    phases = [row["phase"] for row in log_rows]
    for i in range(1, len(phases)):
        if phases[i] != phases[i - 1]:
            ax1.axvline(i + 0.5, color="grey", lw=0.6)
            ax2.axvline(i + 0.5, color="grey", lw=0.6)
    ax2.plot(epochs, [row["val_acc"] for row in log_rows], "-o", ms=3, label="val accuracy")
    ax2.plot(epochs, [row["val_miou"] for row in log_rows], "-s", ms=3, label="val mIoU")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend(fontsize=8)
    _save(fig, path)


def confusion_heatmap(confusion: np.ndarray, class_names, path) -> None:
    fig, ax = plt.subplots(figsize=(7.5, 6.5))
    row_sums = confusion.sum(axis=1, keepdims=True).clip(min=1)
    im = ax.imshow(confusion / row_sums, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(class_names)))
    ax.set_yticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=90, fontsize=7)
    ax.set_yticklabels(class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def sweep_line(xs, series: dict[str, list[float]], xlabel, path, logx=False) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, ys in series.items():
        ax.plot(xs, ys, "-o", ms=4, label=label)
    if logx:
        ax.set_xscale("log", base=2)
        ax.set_xticks(list(xs))
        ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
    ax.set_xlabel(xlabel)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def per_class_recall_bars(class_names, recall_by_count: dict[int, np.ndarray], path) -> None:
    fig, ax = plt.subplots(figsize=(8.5, 3.8))
    counts = sorted(recall_by_count)
    width = 0.8 / max(len(counts), 1)
    xs = np.arange(len(class_names))
    for i, count in enumerate(counts):
        vals = np.nan_to_num(recall_by_count[count])
        ax.bar(xs + i * width, vals, width=width, label=f"{count} points")
    ax.set_xticks(xs + 0.4)
    ax.set_xticklabels(class_names, rotation=90, fontsize=7)
    ax.set_ylabel("recall")
    ax.legend(fontsize=8)
    _save(fig, path)


def ablation_heatmap(delta: np.ndarray, object_names, scene_names, path) -> None:
    fig, ax = plt.subplots(figsize=(8.5, 6.5))
    limit = max(float(np.abs(np.nan_to_num(delta)).max()), 0.05)
    im = ax.imshow(np.nan_to_num(delta), cmap="RdBu", vmin=-limit, vmax=limit)
    ax.set_xticks(range(len(scene_names)))
    ax.set_xticklabels(scene_names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(object_names)))
    ax.set_yticklabels(object_names, fontsize=7)
    ax.set_xlabel("scene class recall delta")
    ax.set_ylabel("removed object class")
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)
