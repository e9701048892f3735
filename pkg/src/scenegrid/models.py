"""Network assemblies: the sparse ResNet14 encoder with a scene-classification
head, the U-Net segmentation decoder for the two-branch multi-task variant,
and a minimal vanilla PointNet for the locality comparison.

The ResNet14 layout is pinned as this artifact's definition: a kernel-3
submanifold stem into widths[0], four stages of two basic residual blocks at
widths (32, 64, 128, 256), the first block of stages 2-4 downsampling with a
stride-2 conv (skip matched by a strided 1x1 projection), then global average
pooling into the latent code.  The decoder mirrors the encoder with three
transposed stride-2 convs, each concatenated with the same-stride encoder
tensor (doubling the channel depth) and followed by two submanifold conv
blocks, ending in a 1x1 conv to object-class logits at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import make_rng
from .nn import (BatchNorm, Linear, Module, Node, SparseTensor, StridedConvDown,
                 SubmanifoldConv, Tape, TransposedConvUp, ops)

VARIANTS = ("resnet14", "resnet14_multitask", "pointnet")


@dataclass
class ModelConfig:
    variant: str = "resnet14"
    use_colour: bool = True                  # False: constant-1 occupancy feature
    widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    scene_classes: int = 21
    object_classes: int = 20
    voxel_size: float = 0.02
    head_hidden: int = 128
    pointnet_points: int = 4096
    precision: str = "float32"               # float64 for gradient tests

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ValueError("widths must be four positive integers")
        if self.scene_classes < 2 or self.object_classes < 2:
            raise ValueError("class counts must be >= 2")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def in_channels(self) -> int:
        return 3 if self.use_colour else 1

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "use_colour": self.use_colour,
            "widths": list(self.widths),
            "scene_classes": self.scene_classes,
            "object_classes": self.object_classes,
            "voxel_size": self.voxel_size,
            "head_hidden": self.head_hidden,
            "pointnet_points": self.pointnet_points,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        kwargs = dict(data)
        if "widths" in kwargs:
            kwargs["widths"] = tuple(kwargs["widths"])
        return cls(**kwargs)


class BasicBlock(Module):
    """conv3-bn-relu-conv3-bn plus skip; optional stride-2 entry."""

    def __init__(self, c_in: int, c_out: int, downsample: bool, rng, dtype):
        super().__init__()
        self.downsample = downsample
        conv_cls = StridedConvDown if downsample else SubmanifoldConv
        self.conv1 = self.add_child("conv1", conv_cls(c_in, c_out, 3, rng, dtype))
        self.bn1 = self.add_child("bn1", BatchNorm(c_out, dtype))
        self.conv2 = self.add_child("conv2", SubmanifoldConv(c_out, c_out, 3, rng, dtype))
        self.bn2 = self.add_child("bn2", BatchNorm(c_out, dtype))
        if downsample or c_in != c_out:
            proj_cls = StridedConvDown if downsample else SubmanifoldConv
            self.proj = self.add_child("proj", proj_cls(c_in, c_out, 1, rng, dtype))
            self.bn_proj = self.add_child("bn_proj", BatchNorm(c_out, dtype))
        else:
            self.proj = None

    def __call__(self, tape: Tape, x: SparseTensor, train: bool) -> SparseTensor:
        h = self.conv1(tape, x)
        h = self.bn1.apply_sparse(tape, h, train)
        h = ops.relu_sparse(tape, h)
        h = self.conv2(tape, h)
        h = self.bn2.apply_sparse(tape, h, train)
        if self.proj is not None:
            skip = self.bn_proj.apply_sparse(tape, self.proj(tape, x), train)
        else:
            skip = x
        return ops.relu_sparse(tape, ops.add_sparse(tape, h, skip))


class Encoder(Module):
    """Stem + 4 residual stages; exposes per-stride tensors for the decoder."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        w = cfg.widths
        self.stem = self.add_child("stem", SubmanifoldConv(cfg.in_channels, w[0], 3, rng, dtype))
        self.stem_bn = self.add_child("stem_bn", BatchNorm(w[0], dtype))
        blocks = []
        for stage, width in enumerate(w):
            c_prev = w[0] if stage == 0 else w[stage - 1]
            for b in range(2):
                downsample = stage > 0 and b == 0
                c_in = c_prev if b == 0 else width
                block = BasicBlock(c_in, width, downsample, rng, dtype)
                self.add_child(f"stage{stage + 1}.block{b + 1}", block)
                blocks.append(block)
        self.blocks = blocks

    def __call__(self, tape: Tape, x: SparseTensor, train: bool):
        h = self.stem(tape, x)
        h = ops.relu_sparse(tape, self.stem_bn.apply_sparse(tape, h, train))
        stage_outputs = []
        for i, block in enumerate(self.blocks):
            h = block(tape, h, train)
            if i % 2 == 1:
                stage_outputs.append(h)
        latent = ops.global_avg_pool(tape, stage_outputs[-1])
        return latent, stage_outputs


class ClassificationHead(Module):
    """linear -> relu -> linear to the full scene-class logit vector."""

    def __init__(self, latent: int, hidden: int, classes: int, rng, dtype):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(latent, hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(hidden, classes, rng, dtype))

    def __call__(self, tape: Tape, z: Node) -> Node:
        return self.fc2(tape, ops.relu(tape, self.fc1(tape, z)))


class UNetDecoder(Module):
    """Mirrors the encoder: 3 up stages with dense skips, then 1x1 conv."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        w = cfg.widths
        self.stages = []
        c_in = w[3]
        for i, target_width in enumerate((w[2], w[1], w[0])):
            stage = Module()
            stage.add_child("up", TransposedConvUp(c_in, target_width, 3, rng, dtype))
            stage.add_child("up_bn", BatchNorm(target_width, dtype))
            c_cat = 2 * target_width  # concat doubles the encoder width
            stage.add_child("conv1", SubmanifoldConv(c_cat, c_cat, 3, rng, dtype))
            stage.add_child("bn1", BatchNorm(c_cat, dtype))
            stage.add_child("conv2", SubmanifoldConv(c_cat, c_cat, 3, rng, dtype))
            stage.add_child("bn2", BatchNorm(c_cat, dtype))
            self.add_child(f"up{i + 1}", stage)
            self.stages.append(stage)
            c_in = c_cat
        self.head = self.add_child("head", SubmanifoldConv(c_in, cfg.object_classes, 1, rng, dtype))

    def __call__(self, tape: Tape, stage_outputs: list[SparseTensor], train: bool) -> SparseTensor:
        if len(stage_outputs) != 4:
            raise ValueError("decoder needs the four cached encoder stage tensors")
        h = stage_outputs[3]
        for stage, skip in zip(self.stages, (stage_outputs[2], stage_outputs[1], stage_outputs[0])):
            up = stage._children["up"](tape, h, skip.coord_set)
            up = ops.relu_sparse(tape, stage._children["up_bn"].apply_sparse(tape, up, train))
            h = ops.concat_features(tape, up, skip)
            h = stage._children["conv1"](tape, h)
            h = ops.relu_sparse(tape, stage._children["bn1"].apply_sparse(tape, h, train))
            h = stage._children["conv2"](tape, h)
            h = ops.relu_sparse(tape, stage._children["bn2"].apply_sparse(tape, h, train))
        return self.head(tape, h)


class SceneClassifier(Module):
    """Single-task variant: sparse encoder + classification head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.dtype
        rng = make_rng(seed, "model", cfg.variant)
        self.encoder = self.add_child("encoder", Encoder(cfg, rng, dtype))
        self.cls_head = self.add_child(
            "cls_head", ClassificationHead(cfg.widths[3], cfg.head_hidden,
                                           cfg.scene_classes, rng, dtype))
        self.finalize_names()

    def forward(self, tape: Tape, batch: SparseTensor, train: bool = False) -> Node:
        latent, _ = self.encoder(tape, batch, train)
        return self.cls_head(tape, latent)


class MultiTaskNet(Module):
    """Shared encoder with classification and segmentation branches."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.dtype
        rng = make_rng(seed, "model", cfg.variant)
        self.encoder = self.add_child("encoder", Encoder(cfg, rng, dtype))
        self.cls_head = self.add_child(
            "cls_head", ClassificationHead(cfg.widths[3], cfg.head_hidden,
                                           cfg.scene_classes, rng, dtype))
        self.decoder = self.add_child("decoder", UNetDecoder(cfg, rng, dtype))
        self.finalize_names()

    def forward(self, tape: Tape, batch: SparseTensor, train: bool = False,
                heads: str = "both"):
        """heads: 'both', 'cls' or 'sem'; the encoder always runs exactly once."""
        latent, stage_outputs = self.encoder(tape, batch, train)
        scores = self.cls_head(tape, latent) if heads in ("both", "cls") else None
        seg = self.decoder(tape, stage_outputs, train) if heads in ("both", "sem") else None
        return scores, seg


class PointNet(Module):
    """Shared per-point MLP, global max pool, classifier MLP."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        dtype = cfg.dtype
        rng = make_rng(seed, "model", "pointnet")
        c_in = 6 if cfg.use_colour else 3
        dims = (64, 128, 1024)
        self.point_mlp = []
        for i, d in enumerate(dims):
            layer = Linear(c_in if i == 0 else dims[i - 1], d, rng, dtype)
            self.add_child(f"point{i + 1}", layer)
            self.point_mlp.append(layer)
        self.fc1 = self.add_child("fc1", Linear(1024, 512, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(512, 256, rng, dtype))
        self.fc3 = self.add_child("fc3", Linear(256, cfg.scene_classes, rng, dtype))
        self.finalize_names()

    def forward(self, tape: Tape, points: Node, train: bool = False) -> Node:
        """points: ((B * n_points), C) rows, scene-major, fixed n_points each."""
        n = self.cfg.pointnet_points
        if len(points.value) % n:
            raise ValueError(
                f"pointnet needs a fixed {n} points per scene, got {len(points.value)} rows")
        h = points
        for layer in self.point_mlp:
            h = ops.relu(tape, layer(tape, h))
        pooled = ops.block_max_pool(tape, h, n)
        h = ops.relu(tape, self.fc1(tape, pooled))
        h = ops.relu(tape, self.fc2(tape, h))
        return self.fc3(tape, h)


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    if cfg.variant == "resnet14":
        return SceneClassifier(cfg, seed)
    if cfg.variant == "resnet14_multitask":
        return MultiTaskNet(cfg, seed)
    return PointNet(cfg, seed)


def build_resnet14(cfg: ModelConfig, seed: int = 0) -> SceneClassifier:
    return SceneClassifier(cfg, seed)


def build_pointnet(cfg: ModelConfig, seed: int = 0) -> PointNet:
    return PointNet(cfg, seed)


def multi_task_forward(model: MultiTaskNet, tape: Tape, batch: SparseTensor,
                       train: bool = False):
    """One encoder pass feeding both output branches."""
    return model.forward(tape, batch, train=train, heads="both")
