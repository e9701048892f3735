"""Geometry-free baselines: colour-histogram nearest neighbour, and random
forests over object-label histograms (oracle labels or labels predicted by a
trained segmentation model).

The forest is built from scratch: bootstrap per tree, sqrt-of-features
candidate subsets per split, Gini impurity, grown until pure.  Everything is
deterministic under a fixed seed (per-tree seeds are derived, so trees can be
trained in any order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import EvalReport, evaluate
from .scene_io import PointCloud, SceneSample
from .seeding import make_rng
from .taxonomy import Taxonomy

COLOUR_BINS_PER_CHANNEL = 10


def colour_histogram(cloud: PointCloud) -> np.ndarray:
    """30-bin histogram: 10 equal-width bins per RGB channel over [0, 255],
    each channel normalised to sum 1, concatenated R||G||B."""
    if cloud.colours is None:
        raise ValueError("colour_histogram needs point colours")
    bins = COLOUR_BINS_PER_CHANNEL
    out = np.empty(3 * bins, dtype=np.float64)
    for c in range(3):
        idx = np.minimum(cloud.colours[:, c].astype(np.int64) * bins // 256, bins - 1)
        counts = np.bincount(idx, minlength=bins).astype(np.float64)
        out[c * bins:(c + 1) * bins] = counts / counts.sum()
    return out


def nn_classify(query: np.ndarray, references: np.ndarray, labels) -> int:
    """Label of the L1-nearest reference histogram; ties to the lowest index."""
    references = np.asarray(references, dtype=np.float64)
    if references.ndim != 2 or len(references) < 1:
        raise ValueError("need at least one reference histogram")
    if references.shape[1] != len(query):
        raise ValueError("histogram dimension mismatch")
    dists = np.abs(references - np.asarray(query)).sum(axis=1)
    return int(np.asarray(labels)[int(np.argmin(dists))])


def label_histogram(labels, num_classes: int) -> np.ndarray:
    """Normalised frequency vector of object-class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("label_histogram of an empty label list")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label id outside [0, num_classes)")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


@dataclass
class RandomForestConfig:
    trees: int = 100
    seed: int = 0
    min_leaf: int = 1

    def __post_init__(self):
        if self.trees < 1 or self.min_leaf < 1:
            raise ValueError("trees and min_leaf must be >= 1")


@dataclass
class _Tree:
    """Array-encoded decision tree: feature < 0 marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([])
        return len(self.feature) - 1

    def predict_counts(self, row: np.ndarray) -> np.ndarray:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if row[self.feature[node]] <= self.threshold[node] \
                else self.right[node]
        return np.asarray(self.counts[node])


@dataclass
class Forest:
    trees: list[_Tree]
    feature_count: int
    class_count: int
    seed: int


def _gini_gain(y_sorted: np.ndarray, class_count: int):
    """Best split position and impurity decrease over one sorted feature.

    Returns (best_index, best_score) where the split sends rows [0, idx) left;
    score is the weighted child impurity (lower is better), or None if the
    feature is constant.
    """
    n = len(y_sorted)
    onehot = np.zeros((n, class_count), dtype=np.float64)
    onehot[np.arange(n), y_sorted] = 1.0
    left_counts = np.cumsum(onehot, axis=0)        # counts for splits after row i
    total = left_counts[-1]

    left_n = np.arange(1, n + 1, dtype=np.float64)
    right_n = n - left_n
    with np.errstate(divide="ignore", invalid="ignore"):
        gini_left = 1.0 - ((left_counts / left_n[:, None]) ** 2).sum(axis=1)
        right_counts = total - left_counts
        gini_right = np.where(right_n[:, None] > 0,
                              right_counts / np.maximum(right_n, 1)[:, None], 0.0)
        gini_right = 1.0 - (gini_right ** 2).sum(axis=1)
    weighted = (left_n * gini_left + right_n * gini_right) / n
    return weighted


def _grow(tree: _Tree, node: int, x: np.ndarray, y: np.ndarray, class_count: int,
          n_candidates: int, rng, min_leaf: int) -> None:
    counts = np.bincount(y, minlength=class_count)
    tree.counts[node] = counts.tolist()
    if len(y) < 2 * min_leaf or len(np.unique(y)) == 1:
        return

    features = np.sort(rng.choice(x.shape[1], size=n_candidates, replace=False))
    best = None  # (score, feature, threshold)
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        distinct = np.nonzero(np.diff(xs))[0]  # split between xs[i] and xs[i+1]
        if len(distinct) == 0:
            continue
        weighted = _gini_gain(y[order], class_count)
        cand = distinct[(distinct + 1 >= min_leaf) & (len(y) - distinct - 1 >= min_leaf)]
        if len(cand) == 0:
            continue
        scores = weighted[cand]
        i = int(cand[int(np.argmin(scores))])
        score = float(weighted[i])
        if best is None or score < best[0] - 1e-15:
            threshold = (xs[i] + xs[i + 1]) / 2.0
            best = (score, int(f), float(threshold))

    if best is None:
        return
    _, f, threshold = best
    go_left = x[:, f] <= threshold
    left = tree.add_node()
    right = tree.add_node()
    tree.feature[node] = f
    tree.threshold[node] = threshold
    tree.left[node] = left
    tree.right[node] = right
    _grow(tree, left, x[go_left], y[go_left], class_count, n_candidates, rng, min_leaf)
    _grow(tree, right, x[~go_left], y[~go_left], class_count, n_candidates, rng, min_leaf)


def rf_train(features: np.ndarray, labels, cfg: RandomForestConfig,
             class_count: int | None = None) -> Forest:
    """Bootstrap-aggregated Gini trees with sqrt-of-features splits."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("training set must be a non-empty (N, F) matrix")
    if len(x) != len(y):
        raise ValueError("features and labels must align")
    if class_count is None:
        class_count = int(y.max()) + 1
    n_candidates = max(1, int(np.ceil(np.sqrt(x.shape[1]))))

    trees = []
    for t in range(cfg.trees):
        rng = make_rng(cfg.seed, "tree", t)
        boot = rng.integers(0, len(x), size=len(x))
        tree = _Tree()
        root = tree.add_node()
        _grow(tree, root, x[boot], y[boot], class_count, n_candidates, rng, cfg.min_leaf)
        trees.append(tree)
    return Forest(trees=trees, feature_count=x.shape[1], class_count=class_count,
                  seed=cfg.seed)


def rf_predict(forest: Forest, row: np.ndarray):
    """Majority vote over trees; returns (class id, per-class vote counts)."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (forest.feature_count,):
        raise ValueError(f"feature row must have length {forest.feature_count}")
    votes = np.zeros(forest.class_count, dtype=np.int64)
    for tree in forest.trees:
        counts = tree.predict_counts(row)
        votes[int(np.argmax(counts))] += 1   # argmax ties to the lower class id
    return int(np.argmax(votes)), votes


def save_forest(forest: Forest, path) -> None:
    doc = {
        "format": "scenegrid-forest",
        "version": 1,
        "feature_count": forest.feature_count,
        "class_count": forest.class_count,
        "seed": forest.seed,
        "trees": [{
            "feature": t.feature, "threshold": t.threshold,
            "left": t.left, "right": t.right, "counts": t.counts,
        } for t in forest.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_forest(path) -> Forest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "scenegrid-forest" or doc.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 forest file")
    trees = [_Tree(feature=t["feature"], threshold=t["threshold"], left=t["left"],
                   right=t["right"], counts=t["counts"]) for t in doc["trees"]]
    return Forest(trees=trees, feature_count=doc["feature_count"],
                  class_count=doc["class_count"], seed=doc["seed"])


# --------------------------------------------------------------------------
# end-to-end baseline pipelines
# --------------------------------------------------------------------------

def colour_nn_pipeline(train_samples: list[SceneSample], val_samples: list[SceneSample],
                       taxonomy: Taxonomy) -> EvalReport:
    """Nearest-neighbour over 30-bin colour histograms."""
    refs = np.stack([colour_histogram(s.cloud) for s in train_samples])
    ref_labels = np.array([s.scene_label for s in train_samples])
    k = taxonomy.num_scene_classes
    scores = np.zeros((len(val_samples), k))
    for i, sample in enumerate(val_samples):
        pred = nn_classify(colour_histogram(sample.cloud), refs, ref_labels)
        scores[i, pred] = 1.0
    truths = [s.scene_label for s in val_samples]
    return evaluate(scores, truths, taxonomy)


def histogram_pipeline(train_samples: list[SceneSample], val_samples: list[SceneSample],
                       taxonomy: Taxonomy, label_source: str = "oracle",
                       model=None, seed: int = 0,
                       rf_cfg: RandomForestConfig | None = None) -> EvalReport:
    """Random forest over per-scene object-label histograms.

    label_source 'oracle' uses ground-truth point labels; 'predicted' runs the
    given segmentation model and histograms its per-point predictions.
    """
    if label_source not in ("oracle", "predicted"):
        raise ValueError("label_source must be 'oracle' or 'predicted'")
    if label_source == "predicted" and model is None:
        raise ValueError("predicted mode needs a trained segmentation model")
    rf_cfg = rf_cfg or RandomForestConfig(seed=seed)
    k_obj = taxonomy.num_object_classes

    def scene_histogram(sample: SceneSample) -> np.ndarray:
        if label_source == "oracle":
            if sample.cloud.semantic_labels is None:
                raise ValueError(f"scene {sample.scene_id} lacks point labels")
            labels = sample.cloud.semantic_labels
        else:
            from .training import predict_point_labels
            labels = predict_point_labels(model, sample, seed)
        return label_histogram(labels, k_obj)

    x_train = np.stack([scene_histogram(s) for s in train_samples])
    y_train = np.array([s.scene_label for s in train_samples])
    forest = rf_train(x_train, y_train, rf_cfg, class_count=taxonomy.num_scene_classes)

    scores = np.zeros((len(val_samples), taxonomy.num_scene_classes))
    for i, sample in enumerate(val_samples):
        _, votes = rf_predict(forest, scene_histogram(sample))
        scores[i] = votes
    truths = [s.scene_label for s in val_samples]
    return evaluate(scores, truths, taxonomy)
