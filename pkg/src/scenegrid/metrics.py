"""Scene-level evaluation: accuracy, per-class recall and IoU, scene-level
mean IoU over the evaluation subset, the confusion matrix, and the near-miss
statistic (errors where the true class holds the second-highest score)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .taxonomy import Taxonomy


@dataclass
class EvalReport:
    accuracy: float
    per_class_recall: np.ndarray    # (num_classes,), nan where undefined
    per_class_iou: np.ndarray       # (num_classes,), nan where undefined
    mean_iou: float                 # over eval-subset classes present anywhere
    confusion: np.ndarray           # (num_classes, num_classes) counts
    near_miss_rate: float           # fraction of errors with true class at rank 2
    class_counts: np.ndarray        # (num_classes,) true scene counts
    predictions: np.ndarray         # (N,) argmax class ids


def confusion_matrix(preds, truths, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError("preds and truths must have equal length")
    if len(preds) and (preds.min() < 0 or preds.max() >= num_classes
                       or truths.min() < 0 or truths.max() >= num_classes):
        raise ValueError("class ids outside the taxonomy range")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (truths, preds), 1)
    return mat


def evaluate(scores: np.ndarray, truths, taxonomy: Taxonomy) -> EvalReport:
    """scores: (N, num_scene_classes) per-scene class scores (logits or votes)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    k = taxonomy.num_scene_classes
    if scores.ndim != 2 or scores.shape[1] != k:
        raise ValueError(f"scores must be (N, {k})")
    if len(scores) != len(truths) or len(scores) == 0:
        raise ValueError("scores and truths must be equal-length and non-empty")

    preds = scores.argmax(axis=1)   # argmax resolves ties to the lower id
    confusion = confusion_matrix(preds, truths, k)
    accuracy = float(np.trace(confusion) / confusion.sum())

    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
        iou = np.where(tp + fn + fp > 0, tp / (tp + fn + fp), np.nan)

    eval_ids = np.array(taxonomy.eval_ids())
    present = (tp + fn + fp)[eval_ids] > 0
    mean_iou = float(iou[eval_ids][present].mean()) if present.any() else float("nan")

    errors = preds != truths
    if errors.any():
        second = np.argsort(-scores, axis=1, kind="stable")[:, 1]
        near_miss_rate = float((second[errors] == truths[errors]).mean())
    else:
        near_miss_rate = 0.0

    return EvalReport(accuracy=accuracy, per_class_recall=recall, per_class_iou=iou,
                      mean_iou=mean_iou, confusion=confusion,
                      near_miss_rate=near_miss_rate,
                      class_counts=confusion.sum(axis=1), predictions=preds)


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def report_to_csv(report: EvalReport, path, taxonomy: Taxonomy,
                  extra_summary: dict | None = None) -> None:
    """One row per class (class,count,recall,iou) plus a summary row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count", "recall", "iou"])
        for i, name in enumerate(taxonomy.scene_classes):
            writer.writerow([name, int(report.class_counts[i]),
                             _fmt(report.per_class_recall[i]), _fmt(report.per_class_iou[i])])
        summary = {"accuracy": _fmt(report.accuracy), "mean_iou": _fmt(report.mean_iou),
                   "near_miss_rate": _fmt(report.near_miss_rate)}
        if extra_summary:
            summary.update(extra_summary)
        writer.writerow([])
        writer.writerow(list(summary.keys()))
        writer.writerow(list(summary.values()))


def confusion_to_csv(confusion: np.ndarray, path, taxonomy: Taxonomy) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + list(taxonomy.scene_classes))
        for i, name in enumerate(taxonomy.scene_classes):
            writer.writerow([name] + [int(v) for v in confusion[i]])
