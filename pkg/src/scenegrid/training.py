"""Losses, the Adam optimiser, cosine annealing, the three-phase multi-task
schedule, and checkpointing.

The combined loss is L = alpha * L_cls + (1 - alpha) * L_sem.  The schedule
trains the segmentation branch alone first (alpha = 0), then freezes the
encoder and trains the classification head, then fine-tunes end-to-end with a
small learning rate.  All stochastic choices derive from (seed, phase, epoch)
tags, so a resumed run retraces an uninterrupted one bit-exactly.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .geometry import AugmentConfig
from .metrics import EvalReport, evaluate
from .models import ModelConfig, MultiTaskNet, PointNet, SceneClassifier, build_model
from .nn import Node, Parameter, Tape, backward, ops
from .pipeline import (SparseBatch, make_pointnet_batch, make_sparse_batch,
                       parallel_map, preprocess_scene)
from .seeding import make_rng
from .taxonomy import Taxonomy

CHECKPOINT_MAGIC = b"S3DR"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("phase", "epoch", "lr", "alpha", "L_cls", "L_sem", "L", "val_acc", "val_miou")


@dataclass
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 1e-3
    fine_tune_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scheduler: str = "none"          # none | cosine
    lr_min: float = 0.0
    epochs_phase1: int = 30
    epochs_phase2: int = 10
    epochs_phase3: int = 10
    epochs_single: int = 30
    alpha_finetune: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("base_lr", "fine_tune_lr", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.scheduler not in ("none", "cosine"):
            raise ValueError("scheduler must be 'none' or 'cosine'")
        if not 0.0 <= self.alpha_finetune <= 1.0:
            raise ValueError("alpha_finetune must lie in [0, 1]")
        for name in ("epochs_phase1", "epochs_phase2", "epochs_phase3", "epochs_single"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "batch_size", "base_lr", "fine_tune_lr", "beta1", "beta2", "eps",
            "scheduler", "lr_min", "epochs_phase1", "epochs_phase2",
            "epochs_phase3", "epochs_single", "alpha_finetune")}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class LossBreakdown:
    """Eq-style weighted sum: L = alpha * L_cls + (1 - alpha) * L_sem."""

    L_cls: float
    L_sem: float
    alpha: float
    L: float


def cross_entropy(tape: Tape, logits: Node, targets, ignore_id: int | None = None) -> Node:
    """Mean negative log-softmax over non-ignored rows (max-stabilised)."""
    return ops.cross_entropy(tape, logits, targets, ignore_id)


def multi_task_loss(tape: Tape, l_cls: Node, l_sem: Node, alpha: float):
    """Weighted-sum total with gradients scaled accordingly."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    total = ops.add(tape, ops.scale(tape, l_cls, alpha),
                    ops.scale(tape, l_sem, 1.0 - alpha))
    breakdown = LossBreakdown(L_cls=float(l_cls.value), L_sem=float(l_sem.value),
                              alpha=alpha, L=float(total.value))
    return total, breakdown


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / total))."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def adam_init(params: list[Parameter]) -> dict:
    return {
        "t": 0,
        "m": {p.name: np.zeros_like(p.value) for p in params},
        "v": {p.name: np.zeros_like(p.value) for p in params},
    }


def adam_step(params: list[Parameter], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in the parameters' own dtype."""
    state["t"] += 1
    t = state["t"]
    for p in params:
        dt = p.value.dtype.type
        m = state["m"][p.name]
        v = state["v"][p.name]
        if m.shape != p.value.shape:
            raise ValueError(f"optimiser state shape mismatch for {p.name!r}")
        g = p.grad
        m[...] = dt(beta1) * m + dt(1.0 - beta1) * g
        v[...] = dt(beta2) * v + dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(1.0 - beta1 ** t)
        v_hat = v / dt(1.0 - beta2 ** t)
        p.value = p.value - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


class Adam:
    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = adam_init(params)

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr,
                  self.cfg.beta1, self.cfg.beta2, self.cfg.eps)


# --------------------------------------------------------------------------
# checkpoint format: magic "S3DR", u32 version, u64 metadata length, YAML
# metadata, then a raw little-endian float32 payload in metadata order.
# --------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: dict      # {"t": int, "m": {...}, "v": {...}} (possibly empty)
    phase: int
    epoch: int


def save_checkpoint(path, model, phase: int, epoch: int, optimizer: Adam | None = None) -> None:
    params = model.named_parameters()
    buffers = model.named_buffers()

    entries = []
    payload = io.BytesIO()
    offset = 0

    def push(kind, name, array):
        nonlocal offset
        arr32 = np.ascontiguousarray(array, dtype="<f4")
        entries.append({"kind": kind, "name": name,
                        "shape": list(array.shape), "offset": offset})
        payload.write(arr32.tobytes())
        offset += arr32.size

    for name, p in params.items():
        push("param", name, p.value)
    for name, (module, buf_name) in buffers.items():
        push("buffer", name, module.get_buffer(buf_name))
    opt_meta = {"type": "none"}
    if optimizer is not None:
        for p in optimizer.params:
            push("adam_m", p.name, optimizer.state["m"][p.name])
        for p in optimizer.params:
            push("adam_v", p.name, optimizer.state["v"][p.name])
        opt_meta = {"type": "adam", "step": optimizer.state["t"],
                    "params": [p.name for p in optimizer.params]}

    meta = {
        "format": "scenegrid-checkpoint",
        "model_config": model.cfg.to_dict(),
        "phase": phase,
        "epoch": epoch,
        "entries": entries,
        "optimizer": opt_meta,
    }
    meta_bytes = yaml.safe_dump(meta, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a scenegrid checkpoint")
    version = struct.unpack("<I", data[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta_len = struct.unpack("<Q", data[8:16])[0]
    if len(data) < 16 + meta_len:
        raise CheckpointError(f"{path}: truncated metadata")
    meta = yaml.safe_load(data[16:16 + meta_len].decode("utf-8"))
    raw = np.frombuffer(data[16 + meta_len:], dtype="<f4")

    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {},
                                                "adam_m": {}, "adam_v": {}}
    for entry in meta["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > raw.size:
            raise CheckpointError(f"{path}: truncated payload at entry {entry['name']!r}")
        arrays[entry["kind"]][entry["name"]] = raw[start:start + size].reshape(shape)

    opt_meta = meta.get("optimizer", {"type": "none"})
    optimizer = {}
    if opt_meta.get("type") == "adam":
        optimizer = {"t": int(opt_meta["step"]), "m": arrays["adam_m"],
                     "v": arrays["adam_v"], "params": list(opt_meta["params"])}

    return Checkpoint(version=version,
                      model_config=ModelConfig.from_dict(meta["model_config"]),
                      params=arrays["param"], buffers=arrays["buffer"],
                      optimizer=optimizer, phase=int(meta["phase"]),
                      epoch=int(meta["epoch"]))


def apply_checkpoint(checkpoint: Checkpoint, model, optimizer: Adam | None = None) -> None:
    """Restore parameters, buffers and (optionally) Adam state into place."""
    params = model.named_parameters()
    if set(params) != set(checkpoint.params):
        missing = sorted(set(params) ^ set(checkpoint.params))
        raise CheckpointError(f"parameter name mismatch: {missing[:5]}")
    for name, p in params.items():
        value = checkpoint.params[name]
        if value.shape != p.value.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {value.shape} "
                f"!= model shape {p.value.shape}")
        p.assign(value)
    for name, (module, buf_name) in model.named_buffers().items():
        if name not in checkpoint.buffers:
            raise CheckpointError(f"buffer {name!r} missing from checkpoint")
        module.set_buffer(buf_name, checkpoint.buffers[name])
    if optimizer is not None and checkpoint.optimizer:
        state = checkpoint.optimizer
        if [p.name for p in optimizer.params] != state["params"]:
            raise CheckpointError("optimiser parameter list mismatch")
        optimizer.state["t"] = state["t"]
        for p in optimizer.params:
            optimizer.state["m"][p.name] = state["m"][p.name].astype(p.value.dtype).copy()
            optimizer.state["v"][p.name] = state["v"][p.name].astype(p.value.dtype).copy()


def load_model_from_checkpoint(path):
    """Rebuild the model a checkpoint describes and load its weights."""
    ckpt = load_checkpoint(path)
    model = build_model(ckpt.model_config, seed=0)
    apply_checkpoint(ckpt, model)
    return model, ckpt


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def predict_scores(model, samples, seed: int, batch_size: int = 16) -> np.ndarray:
    """Eval-mode class scores for every scene, in input order."""
    cfg = model.cfg
    scores = []
    if isinstance(model, PointNet):
        for i in range(0, len(samples), batch_size):
            block, _ = make_pointnet_batch(samples[i:i + batch_size], cfg, seed)
            scores.append(model.forward(Tape(), block, train=False).value)
        return np.concatenate(scores).astype(np.float64)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        voxels = parallel_map(lambda s: preprocess_scene(s, cfg, seed, tag="val"), chunk)
        batch = make_sparse_batch(voxels, cfg)
        if isinstance(model, MultiTaskNet):
            out, _ = model.forward(Tape(), batch.tensor, train=False, heads="cls")
        else:
            out = model.forward(Tape(), batch.tensor, train=False)
        scores.append(out.value)
    return np.concatenate(scores).astype(np.float64)


def predict_point_labels(model: MultiTaskNet, sample, seed: int) -> np.ndarray:
    """Per-point predicted object labels via voxel membership propagation."""
    cfg = model.cfg
    scene = preprocess_scene(sample, cfg, seed, tag="val", keep_point_rows=True)
    batch = make_sparse_batch([scene], cfg)
    _, seg = model.forward(Tape(), batch.tensor, train=False, heads="sem")
    voxel_pred = seg.features.argmax(axis=1)
    # rows were canonically re-sorted during batching; recover the original
    # voxel order through the coordinate sort permutation
    from .nn.sparse import canonical_order
    coords = np.column_stack([np.zeros(len(scene.coords), dtype=np.int64), scene.coords])
    perm = canonical_order(coords)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    return voxel_pred[inverse][scene.point_rows]


def evaluate_model(model, samples, seed: int, taxonomy: Taxonomy,
                   batch_size: int = 16) -> EvalReport:
    scores = predict_scores(model, samples, seed, batch_size)
    truths = [s.scene_label for s in samples]
    return evaluate(scores, truths, taxonomy)


def _nan(x):
    return float("nan") if x is None else x


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _train_epoch_sparse(model, samples, train_cfg: TrainConfig, aug: AugmentConfig | None,
                        seed: int, phase: int, epoch: int, heads: str, alpha: float,
                        optimizer: Adam, lr_fn, train_bn: bool):
    """One pass over the training split; returns mean loss components."""
    cfg = model.cfg
    rng = make_rng(seed, "order", phase, epoch)
    sums = {"L_cls": 0.0, "L_sem": 0.0, "L": 0.0}
    seen = {"L_cls": 0, "L_sem": 0}
    batches = _epoch_batches(len(samples), train_cfg.batch_size, rng)
    lr = None
    for batch_ids in batches:
        chunk = [samples[i] for i in batch_ids]
        voxels = parallel_map(
            lambda s: preprocess_scene(s, cfg, seed, aug=aug, tag=f"train{phase}", epoch=epoch),
            chunk)
        batch = make_sparse_batch(voxels, cfg)

        tape = Tape()
        if isinstance(model, MultiTaskNet):
            cls_scores, seg_logits = model.forward(tape, batch.tensor, train=train_bn,
                                                   heads=heads)
        else:
            cls_scores, seg_logits = model.forward(tape, batch.tensor, train=train_bn), None

        l_cls = cross_entropy(tape, cls_scores, batch.scene_labels) if cls_scores is not None else None
        l_sem = (cross_entropy(tape, seg_logits.feats, batch.voxel_labels, ignore_id=-1)
                 if seg_logits is not None else None)
        if l_cls is not None and l_sem is not None:
            total, bd = multi_task_loss(tape, l_cls, l_sem, alpha)
            sums["L_cls"] += bd.L_cls
            sums["L_sem"] += bd.L_sem
            sums["L"] += bd.L
            seen["L_cls"] += 1
            seen["L_sem"] += 1
        elif l_sem is not None:
            total = l_sem
            sums["L_sem"] += float(l_sem.value)
            sums["L"] += float(l_sem.value)
            seen["L_sem"] += 1
        else:
            total = l_cls
            sums["L_cls"] += float(l_cls.value)
            sums["L"] += float(l_cls.value)
            seen["L_cls"] += 1

        model.zero_grads()
        backward(tape, total)
        lr = lr_fn()
        optimizer.step(lr)

    n = max(len(batches), 1)
    return {
        "lr": lr if lr is not None else lr_fn(),
        "L_cls": sums["L_cls"] / seen["L_cls"] if seen["L_cls"] else None,
        "L_sem": sums["L_sem"] / seen["L_sem"] if seen["L_sem"] else None,
        "L": sums["L"] / n,
    }


def _log_row(phase, epoch, lr, alpha, stats, report: EvalReport) -> dict:
    return {
        "phase": phase, "epoch": epoch, "lr": lr, "alpha": alpha,
        "L_cls": _nan(stats["L_cls"]), "L_sem": _nan(stats["L_sem"]), "L": stats["L"],
        "val_acc": report.accuracy, "val_miou": report.mean_iou,
    }


def _make_lr_fn(train_cfg: TrainConfig, base_lr: float, total_steps: int):
    if train_cfg.scheduler == "cosine":
        counter = {"t": 0}

        def fn():
            lr = cosine_lr(min(counter["t"], total_steps), total_steps, base_lr,
                           train_cfg.lr_min)
            counter["t"] += 1
            return lr

        return fn
    return lambda: base_lr


def run_single_task(model, train_samples, val_samples, train_cfg: TrainConfig,
                    aug: AugmentConfig | None, seed: int, taxonomy: Taxonomy,
                    checkpoint_path=None, resume: Checkpoint | None = None):
    """Plain scene-classification training (resnet14 or pointnet variants)."""
    if isinstance(model, PointNet):
        return _run_single_task_pointnet(model, train_samples, val_samples, train_cfg,
                                         seed, taxonomy, checkpoint_path, resume)
    params = model.parameters()
    optimizer = Adam(params, train_cfg)
    start_epoch = 0
    if resume is not None:
        apply_checkpoint(resume, model, optimizer)
        start_epoch = resume.epoch
    steps_per_epoch = math.ceil(len(train_samples) / train_cfg.batch_size)
    lr_fn = _make_lr_fn(train_cfg, train_cfg.base_lr,
                        train_cfg.epochs_single * steps_per_epoch)
    if resume is not None and train_cfg.scheduler == "cosine":
        for _ in range(start_epoch * steps_per_epoch):
            lr_fn()

    log = []
    for epoch in range(start_epoch, train_cfg.epochs_single):
        stats = _train_epoch_sparse(model, train_samples, train_cfg, aug, seed,
                                    phase=0, epoch=epoch, heads="cls", alpha=1.0,
                                    optimizer=optimizer, lr_fn=lr_fn, train_bn=True)
        report = evaluate_model(model, val_samples, seed, taxonomy, train_cfg.batch_size)
        log.append(_log_row(0, epoch + 1, stats["lr"], 1.0, stats, report))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, phase=0, epoch=epoch + 1,
                            optimizer=optimizer)
    return log


def _run_single_task_pointnet(model: PointNet, train_samples, val_samples,
                              train_cfg: TrainConfig, seed: int, taxonomy: Taxonomy,
                              checkpoint_path=None, resume: Checkpoint | None = None):
    cfg = model.cfg
    params = model.parameters()
    optimizer = Adam(params, train_cfg)
    start_epoch = 0
    if resume is not None:
        apply_checkpoint(resume, model, optimizer)
        start_epoch = resume.epoch
    steps_per_epoch = math.ceil(len(train_samples) / train_cfg.batch_size)
    lr_fn = _make_lr_fn(train_cfg, train_cfg.base_lr,
                        train_cfg.epochs_single * steps_per_epoch)
    if resume is not None and train_cfg.scheduler == "cosine":
        for _ in range(start_epoch * steps_per_epoch):
            lr_fn()

    log = []
    for epoch in range(start_epoch, train_cfg.epochs_single):
        rng = make_rng(seed, "order", 0, epoch)
        sums, lr = 0.0, None
        batches = _epoch_batches(len(train_samples), train_cfg.batch_size, rng)
        for batch_ids in batches:
            chunk = [train_samples[i] for i in batch_ids]
            block, labels = make_pointnet_batch(chunk, cfg, seed, tag="train", epoch=epoch)
            tape = Tape()
            logits = model.forward(tape, block, train=True)
            loss = cross_entropy(tape, logits, labels)
            sums += float(loss.value)
            model.zero_grads()
            backward(tape, loss)
            lr = lr_fn()
            optimizer.step(lr)
        report = evaluate_model(model, val_samples, seed, taxonomy, train_cfg.batch_size)
        stats = {"lr": lr, "L_cls": sums / len(batches), "L_sem": None,
                 "L": sums / len(batches)}
        log.append(_log_row(0, epoch + 1, lr, 1.0, stats, report))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, phase=0, epoch=epoch + 1,
                            optimizer=optimizer)
    return log


def _phase_plan(model: MultiTaskNet, train_cfg: TrainConfig):
    all_params = model.named_parameters()
    encoder_decoder = [p for n, p in all_params.items()
                       if n.startswith(("encoder.", "decoder."))]
    head = [p for n, p in all_params.items() if n.startswith("cls_head.")]
    return [
        # (phase, epochs, lr, alpha, heads, trainable, train_bn)
        (1, train_cfg.epochs_phase1, train_cfg.base_lr, 0.0, "sem", encoder_decoder, True),
        (2, train_cfg.epochs_phase2, train_cfg.base_lr, 1.0, "cls", head, False),
        (3, train_cfg.epochs_phase3, train_cfg.fine_tune_lr, train_cfg.alpha_finetune,
         "both", list(all_params.values()), True),
    ]


def run_schedule(model: MultiTaskNet, train_samples, val_samples,
                 train_cfg: TrainConfig, aug: AugmentConfig | None, seed: int,
                 taxonomy: Taxonomy, checkpoint_path=None,
                 resume: Checkpoint | None = None):
    """Three-phase multi-task training; returns the per-epoch log rows.

    Phase 1 (alpha=0) trains encoder+decoder on segmentation only; phase 2
    freezes them (parameters and batch-norm stats untouched, bit-identical)
    and trains the classification head at the base learning rate; phase 3
    fine-tunes everything end-to-end at the fine-tune learning rate.
    """
    if not isinstance(model, MultiTaskNet):
        raise ValueError("run_schedule needs the multitask variant")
    missing = [s.scene_id for s in train_samples if s.cloud.semantic_labels is None]
    if missing:
        raise ValueError(f"multi-task training needs point labels; missing in {missing[:3]}")

    log = []
    resume_phase = resume.phase if resume is not None else 1
    resume_epoch = resume.epoch if resume is not None else 0
    restored = False

    for phase, epochs, lr, alpha, heads, trainable, train_bn in _phase_plan(model, train_cfg):
        if phase < resume_phase:
            continue
        optimizer = Adam(trainable, train_cfg)
        start_epoch = 0
        if resume is not None and phase == resume_phase:
            apply_checkpoint(resume, model, optimizer)
            start_epoch = resume_epoch
            restored = True
        steps_per_epoch = math.ceil(len(train_samples) / train_cfg.batch_size)
        lr_fn = _make_lr_fn(train_cfg, lr, max(epochs * steps_per_epoch, 1))
        if start_epoch and train_cfg.scheduler == "cosine":
            for _ in range(start_epoch * steps_per_epoch):
                lr_fn()

        for epoch in range(start_epoch, epochs):
            stats = _train_epoch_sparse(model, train_samples, train_cfg, aug, seed,
                                        phase=phase, epoch=epoch, heads=heads,
                                        alpha=alpha, optimizer=optimizer, lr_fn=lr_fn,
                                        train_bn=train_bn)
            report = evaluate_model(model, val_samples, seed, taxonomy,
                                    train_cfg.batch_size)
            log.append(_log_row(phase, epoch + 1, stats["lr"], alpha, stats, report))
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, phase=phase, epoch=epoch + 1,
                                optimizer=optimizer)

    if resume is not None and not restored and resume_phase > 3:
        apply_checkpoint(resume, model)
    return log


def write_log_csv(log_rows: list[dict], path) -> None:
    import csv

    def fmt(key, v):
        if key in ("phase", "epoch"):
            return str(int(v))
        if isinstance(v, float) and math.isnan(v):
            return "nan"
        return f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log_rows:
            writer.writerow([fmt(k, row[k]) for k in LOG_COLUMNS])
