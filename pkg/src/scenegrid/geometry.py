"""Point-cloud preprocessing and perturbation.

All operations are pure functions of (inputs, seed) and are safe to run in
parallel across scenes.  Conventions that tests rely on:

* farthest point sampling breaks distance ties by lowest index and draws its
  first index from the seeded RNG;
* voxel indices use mathematical floor, so -0.01 m at 2 cm lands in cell -1;
* when several points share a voxel the representative (supplying colour and
  label) is drawn uniformly with the seeded RNG, visiting voxels in canonical
  coordinate order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_io import PointCloud
from .seeding import make_rng


class EmptyCloudError(ValueError):
    """An operation would produce a cloud with no points."""


@dataclass
class VoxelCloud:
    """Quantised cloud: unique integer voxel coords plus per-voxel data."""

    coords: np.ndarray            # (M, 3) int64 voxel indices
    features: np.ndarray          # (M, C) float64: RGB in [0,1] or occupancy 1s
    labels: np.ndarray | None     # (M,) int64 object ids
    voxel_size: float

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError("coords must have shape (M, 3) with M >= 1")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if len(np.unique(self.coords, axis=0)) != len(self.coords):
            raise ValueError("voxel coords must be unique")

    def __len__(self) -> int:
        return len(self.coords)

    def centroids(self) -> np.ndarray:
        """Metric centre of each voxel cell."""
        return (self.coords.astype(np.float64) + 0.5) * self.voxel_size


@dataclass
class AugmentConfig:
    """Training-time perturbation ranges."""

    enabled: bool = True
    translation: float = 1.0                  # +/- metres per horizontal axis
    rotate: bool = True                       # full circle about z
    scale_range: tuple[float, float] = (0.8, 1.25)
    jitter_sigma: float = 0.01
    drop_fraction: float = 0.125
    cutout_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        if self.translation < 0:
            raise ValueError("translation must be >= 0")
        if self.scale_range[0] <= 0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError("scale_range must be a positive range")
        if not 0 <= self.drop_fraction < 1:
            raise ValueError("drop_fraction must lie in [0, 1)")
        lo, hi = self.cutout_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("cutout ratios must lie in (0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "translation": self.translation,
            "rotate": self.rotate,
            "scale_range": list(self.scale_range),
            "jitter_sigma": self.jitter_sigma,
            "drop_fraction": self.drop_fraction,
            "cutout_range": list(self.cutout_range),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        kwargs = dict(data)
        for key in ("scale_range", "cutout_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def farthest_point_sample(cloud: PointCloud, n: int, seed: int) -> np.ndarray:
    """Greedy FPS; returns n distinct indices in selection order."""
    pts = cloud.positions
    total = len(pts)
    if not 1 <= n <= total:
        raise ValueError(f"sample size {n} outside [1, {total}]")
    rng = make_rng(seed, "fps")
    first = int(rng.integers(total))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    dists = np.linalg.norm(pts - pts[first], axis=1)
    dists[first] = -1.0  # chosen points never win again (handles duplicates)
    for i in range(1, n):
        nxt = int(np.argmax(dists))  # argmax takes the lowest index on ties
        chosen[i] = nxt
        np.minimum(dists, np.linalg.norm(pts - pts[nxt], axis=1), out=dists)
        dists[nxt] = -1.0
    return chosen


def voxelise(cloud: PointCloud, voxel_size: float, seed: int,
             return_point_rows: bool = False):
    """Quantise onto an integer lattice, resolving conflicts at random.

    With ``return_point_rows`` also returns, per input point, the row of the
    voxel it fell into (used to propagate predictions back to points).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    idx = np.floor(cloud.positions / voxel_size).astype(np.int64)
    # Canonical order: unique(axis=0) sorts coords lexicographically.
    uniq, inverse = np.unique(idx, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    m = len(uniq)

    counts = np.bincount(inverse, minlength=m)
    order = np.argsort(inverse, kind="stable")   # group points by voxel row
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))

    rng = make_rng(seed, "voxel")
    picks = starts + (rng.random(m) * counts).astype(np.int64)
    representatives = order[picks]

    if cloud.colours is not None:
        features = cloud.colours[representatives].astype(np.float64) / 255.0
    else:
        features = np.ones((m, 1), dtype=np.float64)
    labels = None if cloud.semantic_labels is None else cloud.semantic_labels[representatives]
    vox = VoxelCloud(coords=uniq, features=features, labels=labels, voxel_size=voxel_size)
    if return_point_rows:
        return vox, inverse
    return vox


def random_subsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform sample of n points without replacement."""
    total = len(cloud)
    if not 1 <= n <= total:
        raise ValueError(f"sample size {n} outside [1, {total}]")
    rng = make_rng(seed, "subsample")
    return cloud.select(rng.choice(total, size=n, replace=False))


_CORNERS = ("min_min", "min_max", "max_min", "max_max")


def crop_corner(cloud: PointCloud, crop_ratio: float, corner: str | None = None,
                seed: int = 0) -> PointCloud:
    """Keep the corner-anchored box spanning crop_ratio of the xy extents.

    The z extent is kept in full.  Boundaries are inclusive: a point exactly
    on the cut plane is retained.  ``corner=None`` draws one of the four xy
    corners from the seeded RNG.
    """
    if not 0 < crop_ratio <= 1:
        raise ValueError("crop_ratio must lie in (0, 1]")
    if corner is None:
        corner = _CORNERS[int(make_rng(seed, "crop").integers(4))]
    if corner not in _CORNERS:
        raise ValueError(f"corner must be one of {_CORNERS}")

    xy = cloud.positions[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = (hi - lo) * crop_ratio
    keep = np.ones(len(cloud), dtype=bool)
    for axis, anchored_at_min in ((0, corner.startswith("min")), (1, corner.endswith("min"))):
        if anchored_at_min:
            keep &= xy[:, axis] <= lo[axis] + span[axis]
        else:
            keep &= xy[:, axis] >= hi[axis] - span[axis]
    if not keep.any():
        raise EmptyCloudError(f"crop ratio {crop_ratio} at corner {corner} removed every point")
    return cloud.select(keep)


def remove_class(cloud: PointCloud, object_class: int) -> PointCloud:
    """Drop every point labelled with the given object class."""
    if cloud.semantic_labels is None:
        raise ValueError("remove_class needs semantic labels")
    keep = cloud.semantic_labels != object_class
    if keep.all():
        return cloud
    if not keep.any():
        raise EmptyCloudError(f"removing class {object_class} empties the cloud")
    return cloud.select(keep)


def rotate_z(positions: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the vertical axis by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return positions @ rot.T


def _cutout(cloud: PointCloud, keep_ratio: float, corner: str) -> PointCloud:
    """Remove the corner box spanning (1 - keep_ratio) of the xy extents.

    Strict inequalities, so keep_ratio == 1 is an exact identity.
    """
    xy = cloud.positions[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = (hi - lo) * (1.0 - keep_ratio)
    inside = np.ones(len(cloud), dtype=bool)
    for axis, anchored_at_min in ((0, corner.startswith("min")), (1, corner.endswith("min"))):
        if anchored_at_min:
            inside &= xy[:, axis] < lo[axis] + span[axis]
        else:
            inside &= xy[:, axis] > hi[axis] - span[axis]
    if inside.all():
        raise EmptyCloudError("cutout removed every point")
    if not inside.any():
        return cloud
    return cloud.select(~inside)


def augment(cloud: PointCloud, cfg: AugmentConfig, seed: int) -> PointCloud:
    """Apply the training-time perturbation chain.

    Order: translate, rotate about z, isotropic scale, Gaussian jitter,
    uniform point drop, corner cutout.  Colours and labels ride along
    untouched.  Deterministic given (cfg, seed).
    """
    rng = make_rng(seed, "augment")
    pos = cloud.positions

    shift = np.array([rng.uniform(-cfg.translation, cfg.translation),
                      rng.uniform(-cfg.translation, cfg.translation), 0.0])
    pos = pos + shift
    if cfg.rotate:
        pos = rotate_z(pos, rng.uniform(0.0, 2.0 * np.pi))
    pos = pos * rng.uniform(*cfg.scale_range)
    if cfg.jitter_sigma > 0:
        pos = pos + rng.normal(0.0, cfg.jitter_sigma, size=pos.shape)
    out = cloud.replace_positions(pos)

    if cfg.drop_fraction > 0:
        n_drop = int(len(out) * cfg.drop_fraction)
        if n_drop >= len(out):
            raise EmptyCloudError("drop fraction removed every point")
        if n_drop > 0:
            keep = np.sort(rng.permutation(len(out))[n_drop:])
            out = out.select(keep)

    ratio = rng.uniform(*cfg.cutout_range)
    corner = _CORNERS[int(rng.integers(4))]
    if ratio < 1.0:
        out = _cutout(out, ratio, corner)
    return out
