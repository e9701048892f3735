"""Command implementations behind the ``scenegrid`` CLI.

Every command is a pure function of (config, seed): it writes deterministic
CSV reports (byte-identical on rerun), a resolved config snapshot, and, when
figures are enabled, PNG charts next to the CSVs.  Reports that evaluate a
checkpoint record the checkpoint's SHA-256.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

from . import figures
from .baselines import colour_nn_pipeline, histogram_pipeline, RandomForestConfig
from .config import ConfigError, ExperimentConfig, write_resolved_config
from .geometry import EmptyCloudError, crop_corner, farthest_point_sample, remove_class
from .metrics import EvalReport, confusion_to_csv, evaluate, report_to_csv
from .models import MultiTaskNet, build_model
from .scene_io import SceneSample, load_manifest, load_split
from .seeding import derive_seed, make_rng
from .synth import generate_synthetic_dataset
from .taxonomy import Taxonomy
from .training import (evaluate_model, load_model_from_checkpoint, predict_scores,
                       run_schedule, run_single_task, save_checkpoint, write_log_csv)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


def _out_dir(cfg: ExperimentConfig, command: str, out=None) -> Path:
    base = Path(out) if out else Path(cfg.out_dir)
    path = base / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_dataset(cfg: ExperimentConfig, manifest_path=None):
    path = manifest_path or cfg.manifest
    if path is None:
        raise ConfigError("this command needs a dataset manifest "
                          "(config key 'manifest' or --manifest)")
    manifest = load_manifest(path)
    return (load_split(manifest, "train"), load_split(manifest, "val"),
            manifest.taxonomy)


def cmd_gen_data(cfg: ExperimentConfig, out=None) -> Path:
    """Generate the synthetic dataset; returns the manifest path."""
    out_dir = _out_dir(cfg, "dataset", out)
    synth = cfg.synth
    if synth.seed != cfg.seed:
        from dataclasses import replace
        synth = replace(synth, seed=cfg.seed)
    generate_synthetic_dataset(synth, out_dir)
    write_resolved_config(cfg, out_dir)
    manifest_path = out_dir / "manifest.yaml"
    print(f"manifest: {manifest_path}")
    return manifest_path


def _write_scores_csv(path, samples, scores, taxonomy: Taxonomy) -> None:
    preds = scores.argmax(axis=1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "true", "pred"]
                        + [f"score_{n}" for n in taxonomy.scene_classes])
        for i, sample in enumerate(samples):
            writer.writerow([sample.scene_id,
                             taxonomy.scene_classes[sample.scene_label],
                             taxonomy.scene_classes[preds[i]]]
                            + [_fmt(v) for v in scores[i]])


def _write_near_miss(path, samples, scores, taxonomy: Taxonomy) -> None:
    preds = scores.argmax(axis=1)
    ranked = np.argsort(-scores, axis=1, kind="stable")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, sample in enumerate(samples):
            if preds[i] == sample.scene_label:
                continue
            if ranked[i, 1] == sample.scene_label:
                fh.write(f"{sample.scene_id} true={taxonomy.scene_classes[sample.scene_label]} "
                         f"pred={taxonomy.scene_classes[preds[i]]}\n")


def cmd_train(cfg: ExperimentConfig, variant: str | None = None,
              no_colour: bool = False, manifest=None, out=None) -> dict:
    """Train per config; writes checkpoint, per-epoch log and final report."""
    from dataclasses import replace

    model_cfg = cfg.model
    if variant is not None:
        model_cfg = replace(model_cfg, variant=variant)
    if no_colour:
        model_cfg = replace(model_cfg, use_colour=False)

    train_samples, val_samples, taxonomy = _load_dataset(cfg, manifest)
    out_dir = _out_dir(cfg, "train", out)
    write_resolved_config(replace(cfg, model=model_cfg), out_dir)

    model = build_model(model_cfg, seed=cfg.seed)
    ckpt_path = out_dir / "checkpoint.s3dr"
    aug = cfg.augment if cfg.augment.enabled else None
    if model_cfg.variant == "resnet14_multitask":
        log = run_schedule(model, train_samples, val_samples, cfg.train, aug,
                           cfg.seed, taxonomy, checkpoint_path=ckpt_path)
    else:
        log = run_single_task(model, train_samples, val_samples, cfg.train, aug,
                              cfg.seed, taxonomy, checkpoint_path=ckpt_path)

    write_log_csv(log, out_dir / "log.csv")
    report = evaluate_model(model, val_samples, cfg.seed, taxonomy,
                            cfg.train.batch_size)
    report_to_csv(report, out_dir / "eval.csv", taxonomy,
                  extra_summary={"checkpoint_sha256": _sha256(ckpt_path)})
    confusion_to_csv(report.confusion, out_dir / "confusion.csv", taxonomy)
    if cfg.figures:
        figures.training_curves(log, out_dir / "training_curves.png")
        figures.confusion_heatmap(report.confusion, taxonomy.scene_classes,
                                  out_dir / "confusion.png")
    print(f"final val_acc={report.accuracy:.4f} val_miou={report.mean_iou:.4f}")
    return {"log": log, "report": report, "checkpoint": ckpt_path, "out_dir": out_dir}


def cmd_eval(cfg: ExperimentConfig, checkpoint, manifest=None, out=None) -> EvalReport:
    """Full evaluation of a checkpoint: report, confusion, scores, near misses."""
    _, val_samples, taxonomy = _load_dataset(cfg, manifest)
    out_dir = _out_dir(cfg, "eval", out)
    write_resolved_config(cfg, out_dir)

    model, _ = load_model_from_checkpoint(checkpoint)
    scores = predict_scores(model, val_samples, cfg.seed, cfg.train.batch_size)
    report = evaluate(scores, [s.scene_label for s in val_samples], taxonomy)

    report_to_csv(report, out_dir / "eval.csv", taxonomy,
                  extra_summary={"checkpoint_sha256": _sha256(checkpoint)})
    confusion_to_csv(report.confusion, out_dir / "confusion.csv", taxonomy)
    _write_scores_csv(out_dir / "scores.csv", val_samples, scores, taxonomy)
    _write_near_miss(out_dir / "near_miss.txt", val_samples, scores, taxonomy)
    if cfg.figures:
        figures.confusion_heatmap(report.confusion, taxonomy.scene_classes,
                                  out_dir / "confusion.png")
    print(f"val_acc={report.accuracy:.4f} val_miou={report.mean_iou:.4f} "
          f"near_miss_rate={report.near_miss_rate:.4f}")
    return report


def _subsample_dataset(samples: list[SceneSample], count: int, seed: int):
    """FPS-downsample every scene to ``count`` points (fallback: all points)."""
    out, fallbacks = [], 0
    for sample in samples:
        if count >= len(sample.cloud):
            out.append(sample)
            fallbacks += 1
            continue
        idx = farthest_point_sample(sample.cloud, count,
                                    derive_seed(seed, "density", sample.scene_id))
        out.append(SceneSample(cloud=sample.cloud.select(idx),
                               scene_label=sample.scene_label,
                               scene_id=sample.scene_id))
    return out, fallbacks


def cmd_sweep_density(cfg: ExperimentConfig, counts=None, manifest=None, out=None) -> Path:
    """Train and test at each point count (classification branch only)."""
    from dataclasses import replace

    counts = tuple(counts) if counts else cfg.density_counts
    train_samples, val_samples, taxonomy = _load_dataset(cfg, manifest)
    out_dir = _out_dir(cfg, "sweep_density", out)
    write_resolved_config(cfg, out_dir)
    model_cfg = cfg.model if cfg.model.variant != "resnet14_multitask" \
        else replace(cfg.model, variant="resnet14")

    rows = []
    recall_by_count: dict[int, np.ndarray] = {}
    for count in counts:
        sub_train, fb_train = _subsample_dataset(train_samples, count, cfg.seed)
        sub_val, fb_val = _subsample_dataset(val_samples, count, cfg.seed)
        model = build_model(model_cfg, seed=derive_seed(cfg.seed, "density-model", count))
        aug = cfg.augment if cfg.augment.enabled else None
        run_single_task(model, sub_train, sub_val, cfg.train, aug, cfg.seed, taxonomy)
        report = evaluate_model(model, sub_val, cfg.seed, taxonomy, cfg.train.batch_size)
        rows.append({"points": count, "acc": report.accuracy, "miou": report.mean_iou,
                     "fallback_scenes": fb_train + fb_val})
        recall_by_count[count] = report.per_class_recall

    csv_path = out_dir / "density.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["points", "acc", "miou", "fallback_scenes"])
        for row in rows:
            writer.writerow([row["points"], _fmt(row["acc"]), _fmt(row["miou"]),
                             row["fallback_scenes"]])
    with open(out_dir / "density_per_class_recall.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"recall_{c}" for c in counts])
        for i, name in enumerate(taxonomy.scene_classes):
            writer.writerow([name] + [_fmt(recall_by_count[c][i]) for c in counts])
    if cfg.figures:
        figures.sweep_line(list(counts),
                           {"accuracy": [r["acc"] for r in rows],
                            "mIoU": [r["miou"] for r in rows]},
                           "input points", out_dir / "density.png", logx=True)
        figures.per_class_recall_bars(taxonomy.scene_classes,
                                      {c: recall_by_count[c] for c in
                                       (min(counts), max(counts))},
                                      out_dir / "density_per_class_recall.png")
    for row in rows:
        print(f"points={row['points']} acc={row['acc']:.4f} miou={row['miou']:.4f}")
    return csv_path


def _crop_samples(samples: list[SceneSample], ratio: float, seed: int):
    """Test-time corner crops; corner fixed per scene so ratios nest."""
    out, skipped = [], 0
    for sample in samples:
        try:
            cropped = crop_corner(sample.cloud, ratio, corner=None,
                                  seed=derive_seed(seed, "cropcorner", sample.scene_id))
        except EmptyCloudError:
            skipped += 1
            continue
        out.append(SceneSample(cloud=cropped, scene_label=sample.scene_label,
                               scene_id=sample.scene_id))
    return out, skipped


def cmd_sweep_crop(cfg: ExperimentConfig, checkpoint, ratios=None,
                   manifest=None, out=None) -> Path:
    """Evaluate a trained model on corner-cropped test scenes."""
    ratios = tuple(ratios) if ratios else cfg.crop_ratios
    _, val_samples, taxonomy = _load_dataset(cfg, manifest)
    out_dir = _out_dir(cfg, "sweep_crop", out)
    write_resolved_config(cfg, out_dir)
    model, _ = load_model_from_checkpoint(checkpoint)

    rows = []
    for ratio in sorted(ratios):
        cropped, skipped = _crop_samples(val_samples, ratio, cfg.seed)
        report = evaluate_model(model, cropped, cfg.seed, taxonomy, cfg.train.batch_size)
        rows.append({"ratio": ratio, "acc": report.accuracy, "miou": report.mean_iou,
                     "skipped_scenes": skipped})

    csv_path = out_dir / "crop.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "acc", "miou", "skipped_scenes"])
        for row in rows:
            writer.writerow([_fmt(row["ratio"]), _fmt(row["acc"]), _fmt(row["miou"]),
                             row["skipped_scenes"]])
    with open(out_dir / "run_info.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint_sha256"])
        writer.writerow([_sha256(checkpoint)])
    if cfg.figures:
        figures.sweep_line([r["ratio"] for r in rows],
                           {"accuracy": [r["acc"] for r in rows],
                            "mIoU": [r["miou"] for r in rows]},
                           "crop ratio", out_dir / "crop.png")
    for row in rows:
        print(f"ratio={row['ratio']:.2f} acc={row['acc']:.4f} miou={row['miou']:.4f}")
    return csv_path


def cmd_ablate_class(cfg: ExperimentConfig, checkpoint, manifest=None, out=None) -> Path:
    """Recall deltas per scene class after removing each object class."""
    _, val_samples, taxonomy = _load_dataset(cfg, manifest)
    out_dir = _out_dir(cfg, "ablate_class", out)
    write_resolved_config(cfg, out_dir)
    model, _ = load_model_from_checkpoint(checkpoint)

    baseline = evaluate_model(model, val_samples, cfg.seed, taxonomy,
                              cfg.train.batch_size)
    base_recall = baseline.per_class_recall

    delta = np.zeros((taxonomy.num_object_classes, taxonomy.num_scene_classes))
    skipped_counts = []
    for obj_id, obj_name in enumerate(taxonomy.object_classes):
        kept, skipped = [], 0
        for sample in val_samples:
            try:
                cloud = remove_class(sample.cloud, obj_id)
            except EmptyCloudError:
                skipped += 1
                continue
            kept.append(SceneSample(cloud=cloud, scene_label=sample.scene_label,
                                    scene_id=sample.scene_id))
        report = evaluate_model(model, kept, cfg.seed, taxonomy, cfg.train.batch_size)
        delta[obj_id] = np.nan_to_num(report.per_class_recall) - np.nan_to_num(base_recall)
        skipped_counts.append(skipped)

    csv_path = out_dir / "ablate_class.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["removed_object"] + list(taxonomy.scene_classes)
                        + ["skipped_scenes"])
        for obj_id, obj_name in enumerate(taxonomy.object_classes):
            writer.writerow([obj_name] + [_fmt(v) for v in delta[obj_id]]
                            + [skipped_counts[obj_id]])
        writer.writerow(["baseline_recall"] + [_fmt(v) for v in base_recall] + [0])
    with open(out_dir / "run_info.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint_sha256"])
        writer.writerow([_sha256(checkpoint)])
    if cfg.figures:
        figures.ablation_heatmap(delta, taxonomy.object_classes,
                                 taxonomy.scene_classes, out_dir / "ablate_class.png")
    print(f"mean |recall delta| = {np.abs(delta).mean():.4f}")
    return csv_path


def cmd_baseline(cfg: ExperimentConfig, which: str, checkpoint=None,
                 manifest=None, out=None) -> EvalReport:
    """Run one geometry-free baseline and write its evaluation report."""
    if which not in ("colour-nn", "rf-oracle", "rf-predicted"):
        raise ConfigError("baseline must be colour-nn, rf-oracle or rf-predicted")
    train_samples, val_samples, taxonomy = _load_dataset(cfg, manifest)
    out_dir = _out_dir(cfg, f"baseline_{which.replace('-', '_')}", out)
    write_resolved_config(cfg, out_dir)

    extra = {}
    if which == "colour-nn":
        report = colour_nn_pipeline(train_samples, val_samples, taxonomy)
    elif which == "rf-oracle":
        report = histogram_pipeline(train_samples, val_samples, taxonomy,
                                    label_source="oracle",
                                    rf_cfg=RandomForestConfig(seed=cfg.seed))
    else:
        if checkpoint is None:
            raise ConfigError("rf-predicted needs --checkpoint with a trained "
                              "segmentation model")
        model, _ = load_model_from_checkpoint(checkpoint)
        if not isinstance(model, MultiTaskNet):
            raise ConfigError("rf-predicted needs a multitask checkpoint "
                              "(it provides the segmentation branch)")
        report = histogram_pipeline(train_samples, val_samples, taxonomy,
                                    label_source="predicted", model=model,
                                    seed=cfg.seed,
                                    rf_cfg=RandomForestConfig(seed=cfg.seed))
        extra["checkpoint_sha256"] = _sha256(checkpoint)

    report_to_csv(report, out_dir / "eval.csv", taxonomy, extra_summary=extra)
    confusion_to_csv(report.confusion, out_dir / "confusion.csv", taxonomy)
    if cfg.figures:
        figures.confusion_heatmap(report.confusion, taxonomy.scene_classes,
                                  out_dir / "confusion.png")
    print(f"{which}: val_acc={report.accuracy:.4f} val_miou={report.mean_iou:.4f}")
    return report
