"""Scene -> network input plumbing: augmentation, voxelisation, batching.

Batches concatenate variable-size scenes as sparse tensors with distinct
batch indices (no padding).  Per-scene seeds derive from the run seed plus
stable tags, so validation preprocessing is identical across epochs and
across the train/eval commands.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import AugmentConfig, augment, farthest_point_sample, random_subsample, voxelise
from .models import ModelConfig
from .nn.sparse import SparseTensor, canonical_order
from .nn.tape import Node
from .scene_io import PointCloud, SceneSample
from .seeding import derive_seed


def worker_count() -> int:
    """Parallelism cap from SCENEGRID_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SCENEGRID_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map honouring the worker cap; pure functions only."""
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class VoxelScene:
    """One preprocessed scene ready for batching."""

    coords: np.ndarray        # (M, 3) int64
    features: np.ndarray      # (M, C)
    labels: np.ndarray        # (M,) int64, -1 where unknown
    scene_label: int
    scene_id: str
    point_rows: np.ndarray | None = None   # original point -> voxel row


def preprocess_scene(sample: SceneSample, cfg: ModelConfig, seed: int,
                     aug: AugmentConfig | None = None, tag: str = "val",
                     epoch: int = 0, max_points: int | None = None,
                     sampler: str = "fps", keep_point_rows: bool = False) -> VoxelScene:
    """Augment (optional), optionally downsample, then voxelise one scene."""
    cloud = sample.cloud
    if aug is not None and aug.enabled:
        cloud = augment(cloud, aug, derive_seed(seed, "aug", tag, epoch, sample.scene_id))
    if max_points is not None and max_points < len(cloud):
        sub_seed = derive_seed(seed, "sub", tag, epoch, sample.scene_id)
        if sampler == "fps":
            cloud = cloud.select(farthest_point_sample(cloud, max_points, sub_seed))
        else:
            cloud = random_subsample(cloud, max_points, sub_seed)
    vox_seed = derive_seed(seed, "vox", tag, epoch, sample.scene_id)
    result = voxelise(cloud, cfg.voxel_size, vox_seed, return_point_rows=keep_point_rows)
    vox, rows = result if keep_point_rows else (result, None)

    if cfg.use_colour:
        if vox.features.shape[1] != 3:
            raise ValueError(f"scene {sample.scene_id} has no colours but use_colour=True")
        features = vox.features
    else:
        features = np.ones((len(vox), 1))
    labels = vox.labels if vox.labels is not None else np.full(len(vox), -1, dtype=np.int64)
    return VoxelScene(coords=vox.coords, features=features.astype(cfg.dtype),
                      labels=labels, scene_label=sample.scene_label,
                      scene_id=sample.scene_id, point_rows=rows)


@dataclass
class SparseBatch:
    tensor: SparseTensor
    scene_labels: np.ndarray     # (B,)
    voxel_labels: np.ndarray     # (M,) aligned with tensor rows
    scene_of_row: np.ndarray     # (M,) batch index per row
    scene_ids: list[str]


def make_sparse_batch(scenes: list[VoxelScene], cfg: ModelConfig) -> SparseBatch:
    coords = np.concatenate([
        np.column_stack([np.full(len(s.coords), b, dtype=np.int64), s.coords])
        for b, s in enumerate(scenes)])
    feats = np.concatenate([s.features for s in scenes]).astype(cfg.dtype)
    labels = np.concatenate([s.labels for s in scenes])

    perm = canonical_order(coords)
    tensor = SparseTensor.from_arrays(coords[perm], feats[perm])
    return SparseBatch(
        tensor=tensor,
        scene_labels=np.array([s.scene_label for s in scenes], dtype=np.int64),
        voxel_labels=labels[perm],
        scene_of_row=tensor.coords[:, 0],
        scene_ids=[s.scene_id for s in scenes],
    )


def make_pointnet_batch(samples: list[SceneSample], cfg: ModelConfig, seed: int,
                        tag: str = "val", epoch: int = 0):
    """Centred fixed-size point blocks: ((B*n), C) rows plus labels."""
    n = cfg.pointnet_points
    rows = []
    for sample in samples:
        cloud = sample.cloud
        sub_seed = derive_seed(seed, "pn", tag, epoch, sample.scene_id)
        if len(cloud) >= n:
            cloud = cloud.select(farthest_point_sample(cloud, n, sub_seed))
        else:
            # sample with replacement up to the fixed count
            rng_rows = np.arange(len(cloud))
            reps = np.resize(rng_rows, n)
            cloud = cloud.select(reps)
        xyz = cloud.positions - cloud.positions.mean(axis=0)
        if cfg.use_colour:
            if cloud.colours is None:
                raise ValueError(f"scene {sample.scene_id} has no colours but use_colour=True")
            feats = np.concatenate([xyz, cloud.colours / 255.0], axis=1)
        else:
            feats = xyz
        rows.append(feats)
    block = np.concatenate(rows).astype(cfg.dtype)
    labels = np.array([s.scene_label for s in samples], dtype=np.int64)
    return Node(block), labels
