"""Procedural synthetic scene generator.

Every scene class owns a template: a room box with class-typical extents plus
class-typical furniture primitives, each carrying an object label and a
palette.  The templates are designed so the scene type is predictable from
geometry alone (extents and object shapes), from colour alone (weakly: wall
and floor tones are shared between classes), and from the object-label
histogram alone.  Marker objects (a bed in bedrooms, a bathtub in bathrooms)
are always present but never the only cue.

Generation is a pure function of :class:`SynthConfig`: the same seed yields a
byte-identical dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene_io import (DatasetManifest, PointCloud, SceneSample,
                       quantize_positions, save_manifest, save_scene)
from .seeding import make_rng
from .taxonomy import Taxonomy, DEFAULT_TAXONOMY


@dataclass
class SynthConfig:
    """Knobs of the generator; all randomness flows from ``seed``."""

    scenes_per_class: int = 10
    points_per_scene: tuple[int, int] = (1800, 2200)
    room_extent_x: tuple[float, float] = (1.0, 11.0)
    room_extent_y: tuple[float, float] = (1.0, 10.0)
    room_extent_z: tuple[float, float] = (2.0, 5.0)
    noise_sigma: float = 0.004
    val_fraction: float = 0.2
    test_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scenes_per_class < 1:
            raise ValueError("scenes_per_class must be >= 1")
        lo, hi = self.points_per_scene
        if lo < 1 or hi < lo:
            raise ValueError("points_per_scene must be a non-empty positive range")
        for name in ("room_extent_x", "room_extent_y", "room_extent_z"):
            a, b = getattr(self, name)
            if a <= 0 or b < a:
                raise ValueError(f"{name} must be a positive range")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.val_fraction < 1 or not 0 <= self.test_fraction < 1:
            raise ValueError("split fractions must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "scenes_per_class": self.scenes_per_class,
            "points_per_scene": list(self.points_per_scene),
            "room_extent_x": list(self.room_extent_x),
            "room_extent_y": list(self.room_extent_y),
            "room_extent_z": list(self.room_extent_z),
            "noise_sigma": self.noise_sigma,
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        kwargs = dict(data)
        for key in ("points_per_scene", "room_extent_x", "room_extent_y", "room_extent_z"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# Base footprint (dx, dy, dz) in metres per object class.
_OBJECT_DIMS = {
    "cabinet": (0.6, 0.5, 1.4),
    "bed": (1.9, 1.5, 0.55),
    "chair": (0.45, 0.45, 0.85),
    "sofa": (1.9, 0.85, 0.75),
    "table": (1.5, 0.9, 0.74),
    "door": (0.9, 0.04, 2.0),
    "window": (1.2, 0.04, 1.1),
    "bookshelf": (0.9, 0.3, 1.9),
    "picture": (0.7, 0.03, 0.5),
    "counter": (1.8, 0.6, 0.9),
    "desk": (1.3, 0.65, 0.75),
    "curtain": (1.4, 0.05, 2.1),
    "refrigerator": (0.7, 0.7, 1.8),
    "shower_curtain": (1.5, 0.05, 1.9),
    "toilet": (0.4, 0.6, 0.75),
    "sink": (0.5, 0.45, 0.85),
    "bathtub": (1.6, 0.75, 0.55),
    "otherfurniture": (0.6, 0.6, 0.8),
}

# Default object colours; templates may override per object.
_OBJECT_COLOURS = {
    "cabinet": (120, 85, 60),
    "bed": (95, 110, 170),
    "chair": (105, 95, 80),
    "sofa": (130, 70, 70),
    "table": (140, 105, 70),
    "door": (150, 115, 80),
    "window": (185, 210, 225),
    "bookshelf": (110, 80, 55),
    "picture": (175, 150, 120),
    "counter": (165, 165, 160),
    "desk": (125, 100, 75),
    "curtain": (170, 160, 140),
    "refrigerator": (200, 200, 205),
    "shower_curtain": (190, 205, 215),
    "toilet": (225, 225, 230),
    "sink": (210, 210, 215),
    "bathtub": (220, 225, 230),
    "otherfurniture": (110, 110, 110),
}

# Shared wall/floor tones: classes reuse them, keeping colour a weak cue.
_WALL_TONES = ((228, 224, 214), (196, 196, 200), (214, 204, 182))
_FLOOR_TONES = ((150, 110, 75), (172, 172, 176), (95, 108, 140), (138, 88, 86))


@dataclass(frozen=True)
class _Obj:
    name: str
    lo: int
    hi: int
    scale: tuple[float, float] = (0.85, 1.15)
    mount: str = "floor"   # "floor" or "wall"
    colour: tuple[int, int, int] | None = None


@dataclass(frozen=True)
class _Template:
    extent_x: tuple[float, float]
    extent_y: tuple[float, float]
    extent_z: tuple[float, float] = (2.3, 2.9)
    shell_fraction: tuple[float, float] = (0.42, 0.55)
    objects: tuple[_Obj, ...] = ()
    special: str | None = None


_TEMPLATES: dict[str, _Template] = {
    "apartment": _Template((6.0, 7.5), (5.0, 6.5), objects=(
        _Obj("bed", 1, 1), _Obj("sofa", 1, 1), _Obj("table", 1, 2),
        _Obj("refrigerator", 1, 1), _Obj("chair", 2, 4), _Obj("cabinet", 1, 2),
        _Obj("door", 1, 2, mount="wall"))),
    "bathroom": _Template((2.0, 2.8), (1.8, 2.6), objects=(
        _Obj("bathtub", 1, 1), _Obj("toilet", 1, 1), _Obj("sink", 1, 1),
        _Obj("shower_curtain", 0, 1, mount="wall"), _Obj("cabinet", 0, 1),
        _Obj("door", 1, 1, mount="wall"))),
    "bedroom": _Template((3.4, 4.4), (3.0, 4.0), objects=(
        _Obj("bed", 1, 2), _Obj("cabinet", 1, 2), _Obj("curtain", 0, 1, mount="wall"),
        _Obj("picture", 0, 2, mount="wall"), _Obj("door", 1, 1, mount="wall"))),
    "classroom": _Template((6.5, 8.0), (5.5, 7.0), objects=(
        _Obj("desk", 8, 12), _Obj("chair", 8, 12),
        _Obj("picture", 1, 2, (1.8, 2.4), mount="wall"), _Obj("door", 1, 1, mount="wall"))),
    "closet": _Template((1.2, 1.9), (1.0, 1.6), extent_z=(2.1, 2.4), objects=(
        _Obj("cabinet", 1, 2), _Obj("otherfurniture", 1, 2, (0.6, 0.9)),
        _Obj("door", 1, 1, mount="wall"))),
    "computer_cluster": _Template((5.0, 6.0), (4.2, 5.2), objects=(
        _Obj("desk", 6, 9), _Obj("chair", 6, 9),
        _Obj("otherfurniture", 3, 6, (0.5, 0.7), colour=(60, 60, 65)),
        _Obj("door", 1, 1, mount="wall"))),
    "conference_room": _Template((5.0, 6.5), (3.8, 5.0), objects=(
        _Obj("table", 1, 1, (1.9, 2.4)), _Obj("chair", 8, 12),
        _Obj("picture", 0, 1, (1.5, 2.0), mount="wall"), _Obj("door", 1, 1, mount="wall"))),
    "copy_room": _Template((2.6, 3.4), (2.2, 3.2), objects=(
        _Obj("otherfurniture", 1, 2, (1.4, 1.7), colour=(205, 205, 200)),
        _Obj("counter", 1, 1), _Obj("cabinet", 1, 2), _Obj("door", 1, 1, mount="wall"))),
    "dining_room": _Template((4.0, 5.2), (3.6, 4.8), objects=(
        _Obj("table", 1, 2, (1.2, 1.5)), _Obj("chair", 4, 8), _Obj("cabinet", 0, 1),
        _Obj("picture", 0, 1, mount="wall"), _Obj("door", 1, 1, mount="wall"))),
    "game_room": _Template((4.2, 5.8), (3.8, 5.0), objects=(
        _Obj("table", 1, 1, (1.6, 1.9), colour=(40, 110, 70)), _Obj("sofa", 1, 2),
        _Obj("otherfurniture", 1, 3), _Obj("picture", 0, 1, mount="wall"),
        _Obj("door", 1, 1, mount="wall"))),
    "gym": _Template((8.0, 10.5), (6.5, 9.0), extent_z=(3.2, 4.0), shell_fraction=(0.5, 0.62),
                     objects=(
        _Obj("otherfurniture", 4, 8, (1.2, 1.6), colour=(70, 120, 90)),
        _Obj("chair", 0, 2), _Obj("door", 1, 2, mount="wall"))),
    "hallway": _Template((6.0, 9.0), (1.2, 1.9), shell_fraction=(0.62, 0.75), objects=(
        _Obj("door", 2, 4, mount="wall"), _Obj("picture", 0, 2, mount="wall"))),
    "kitchen": _Template((3.0, 4.2), (2.6, 3.8), objects=(
        _Obj("counter", 1, 2), _Obj("refrigerator", 1, 1), _Obj("sink", 1, 1),
        _Obj("cabinet", 2, 4), _Obj("table", 0, 1), _Obj("chair", 0, 2),
        _Obj("door", 1, 1, mount="wall"))),
    "laundry_room": _Template((2.4, 3.2), (2.2, 3.0), objects=(
        _Obj("otherfurniture", 2, 3, (1.0, 1.2), colour=(215, 215, 220)),
        _Obj("counter", 0, 1), _Obj("sink", 1, 1), _Obj("cabinet", 0, 1),
        _Obj("door", 1, 1, mount="wall"))),
    "library": _Template((6.0, 8.0), (5.0, 6.5), objects=(
        _Obj("bookshelf", 6, 10), _Obj("table", 2, 4), _Obj("chair", 4, 8),
        _Obj("door", 1, 2, mount="wall"))),
    "living_room": _Template((4.6, 6.0), (4.0, 5.2), objects=(
        _Obj("sofa", 1, 2), _Obj("table", 1, 2), _Obj("picture", 1, 3, mount="wall"),
        _Obj("curtain", 1, 2, mount="wall"), _Obj("window", 1, 2, mount="wall"),
        _Obj("bookshelf", 0, 1), _Obj("door", 1, 1, mount="wall"))),
    "lobby": _Template((7.0, 9.0), (5.5, 7.5), extent_z=(2.8, 3.4), objects=(
        _Obj("sofa", 2, 4), _Obj("table", 1, 3), _Obj("picture", 1, 2, mount="wall"),
        _Obj("door", 2, 3, mount="wall"))),
    "misc": _Template((2.2, 6.5), (2.0, 6.0), special="misc", objects=(
        _Obj("door", 0, 1, mount="wall"),)),
    "office": _Template((3.4, 4.8), (3.0, 4.2), objects=(
        _Obj("desk", 1, 3), _Obj("chair", 1, 4), _Obj("bookshelf", 1, 2),
        _Obj("cabinet", 0, 2), _Obj("picture", 0, 2, mount="wall"),
        _Obj("door", 1, 1, mount="wall"))),
    "stairs": _Template((2.4, 3.6), (2.2, 3.4), extent_z=(3.6, 4.6), special="stairs", objects=(
        _Obj("door", 0, 1, mount="wall"), _Obj("otherfurniture", 0, 1))),
    "storage": _Template((2.2, 3.4), (2.0, 3.2), objects=(
        _Obj("cabinet", 3, 6), _Obj("otherfurniture", 2, 5, (0.7, 1.0), colour=(150, 125, 95)),
        _Obj("door", 1, 1, mount="wall"))),
}

_MISC_POOL = ("chair", "table", "cabinet", "otherfurniture", "desk", "sofa", "bookshelf")


def _sample_rect(rng, n, origin, eu, ev):
    u = rng.random(n)[:, None]
    v = rng.random(n)[:, None]
    return np.asarray(origin) + u * np.asarray(eu) + v * np.asarray(ev)


def _box_faces(center, size, include_bottom=False):
    cx, cy, cz = center
    sx, sy, sz = size
    x0, y0, z0 = cx - sx / 2, cy - sy / 2, cz - sz / 2
    faces = [
        ((x0, y0, z0 + sz), (sx, 0, 0), (0, sy, 0), sx * sy),          # top
        ((x0, y0, z0), (sx, 0, 0), (0, 0, sz), sx * sz),               # -y side
        ((x0, y0 + sy, z0), (sx, 0, 0), (0, 0, sz), sx * sz),          # +y side
        ((x0, y0, z0), (0, sy, 0), (0, 0, sz), sy * sz),               # -x side
        ((x0 + sx, y0, z0), (0, sy, 0), (0, 0, sz), sy * sz),          # +x side
    ]
    if include_bottom:
        faces.append(((x0, y0, z0), (sx, 0, 0), (0, sy, 0), sx * sy))
    return faces


def _sample_box_surface(rng, n, center, size):
    faces = _box_faces(center, size)
    areas = np.array([f[3] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    chunks = [_sample_rect(rng, c, o, eu, ev) for (o, eu, ev, _), c in zip(faces, counts) if c > 0]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))


def _jitter_colour(rng, base, n, sigma=9.0):
    c = np.asarray(base, dtype=np.float64) + rng.normal(0.0, sigma, size=(n, 3))
    return np.clip(np.rint(c), 0, 255).astype(np.uint8)


def _clip_range(template_range, config_range):
    lo = min(max(template_range[0], config_range[0]), config_range[1])
    hi = max(min(template_range[1], config_range[1]), config_range[0])
    return (lo, hi) if hi >= lo else (config_range[0], config_range[1])


@dataclass
class _Surface:
    points_fn: object      # rng, n -> (n, 3) array
    area: float
    label: int
    colour: tuple[int, int, int]


def _wall_mount_surface(rng, obj_name, ex, ey, scale):
    """Place a wall-fixed rectangle (door, window, picture, curtain) on a random wall."""
    dx, _, dz = _OBJECT_DIMS[obj_name]
    w, h = dx * scale, dz * scale
    heights = {"door": 0.0, "window": 0.85, "picture": 1.25, "curtain": 0.02,
               "shower_curtain": 0.15}
    z0 = heights.get(obj_name, 0.5)
    wall = rng.integers(4)
    if wall in (0, 1):  # y = 0 or y = ey
        x0 = rng.uniform(0.05, max(ex - w - 0.05, 0.06))
        y = 0.0 if wall == 0 else ey
        return ((x0, y, z0), (w, 0, 0), (0, 0, h), w * h)
    y0 = rng.uniform(0.05, max(ey - w - 0.05, 0.06))
    x = 0.0 if wall == 2 else ex
    return ((x, y0, z0), (0, w, 0), (0, 0, h), w * h)


def _stairs_surfaces(rng, ex, ey, ez, floor_label, floor_colour):
    """Ascending steps along x: top and riser per step, labelled as floor."""
    n_steps = int(rng.integers(8, 13))
    width = 0.8 * ey
    y0 = 0.1 * ey
    depth = ex / n_steps
    rise = (0.85 * ez) / n_steps
    surfaces = []
    for i in range(n_steps):
        x0 = i * depth
        z_top = (i + 1) * rise
        surfaces.append(_Surface(
            (lambda o, eu, ev: (lambda rng, n: _sample_rect(rng, n, o, eu, ev)))(
                (x0, y0, z_top), (depth, 0, 0), (0, width, 0)),
            depth * width, floor_label, floor_colour))
        surfaces.append(_Surface(
            (lambda o, eu, ev: (lambda rng, n: _sample_rect(rng, n, o, eu, ev)))(
                (x0, y0, i * rise), (0, width, 0), (0, 0, rise)),
            rise * width, floor_label, floor_colour))
    return surfaces


def generate_scene(scene_class: str, index: int, cfg: SynthConfig,
                   taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> SceneSample:
    """Generate one labelled scene; deterministic in (cfg.seed, class, index)."""
    template = _TEMPLATES[scene_class]
    rng = make_rng(cfg.seed, "scene", scene_class, index)
    class_idx = taxonomy.scene_id(scene_class)

    ex = rng.uniform(*_clip_range(template.extent_x, cfg.room_extent_x))
    ey = rng.uniform(*_clip_range(template.extent_y, cfg.room_extent_y))
    ez = rng.uniform(*_clip_range(template.extent_z, cfg.room_extent_z))
    n_total = int(rng.integers(cfg.points_per_scene[0], cfg.points_per_scene[1] + 1))

    wall_tone = _WALL_TONES[class_idx % len(_WALL_TONES)]
    floor_tone = _FLOOR_TONES[class_idx % len(_FLOOR_TONES)]
    wall_id = taxonomy.object_id("wall")
    floor_id = taxonomy.object_id("floor")

    surfaces: list[_Surface] = []

    def rect_surface(origin, eu, ev, area, label, colour):
        surfaces.append(_Surface(
            (lambda o, u, v: (lambda rng, n: _sample_rect(rng, n, o, u, v)))(origin, eu, ev),
            area, label, colour))

    # Room shell: floor plus four walls.
    rect_surface((0, 0, 0), (ex, 0, 0), (0, ey, 0), ex * ey, floor_id, floor_tone)
    rect_surface((0, 0, 0), (ex, 0, 0), (0, 0, ez), ex * ez, wall_id, wall_tone)
    rect_surface((0, ey, 0), (ex, 0, 0), (0, 0, ez), ex * ez, wall_id, wall_tone)
    rect_surface((0, 0, 0), (0, ey, 0), (0, 0, ez), ey * ez, wall_id, wall_tone)
    rect_surface((ex, 0, 0), (0, ey, 0), (0, 0, ez), ey * ez, wall_id, wall_tone)
    shell_count = len(surfaces)

    specs = list(template.objects)
    if template.special == "misc":
        picks = rng.choice(len(_MISC_POOL), size=int(rng.integers(2, 5)), replace=False)
        for p in sorted(picks):
            specs.append(_Obj(_MISC_POOL[p], 1, 3))

    for spec in specs:
        count = int(rng.integers(spec.lo, spec.hi + 1))
        base_colour = spec.colour or _OBJECT_COLOURS[spec.name]
        label = taxonomy.object_id(spec.name)
        for _ in range(count):
            scale = rng.uniform(*spec.scale)
            if spec.mount == "wall":
                origin, eu, ev, area = _wall_mount_surface(rng, spec.name, ex, ey, scale)
                rect_surface(origin, eu, ev, area, label, base_colour)
                continue
            dx, dy, dz = (d * scale for d in _OBJECT_DIMS[spec.name])
            dx, dy = min(dx, 0.9 * ex), min(dy, 0.9 * ey)
            cx = rng.uniform(dx / 2, ex - dx / 2)
            cy = rng.uniform(dy / 2, ey - dy / 2)
            center, size = (cx, cy, dz / 2), (dx, dy, dz)
            area = 2 * (dx * dz + dy * dz) + dx * dy
            surfaces.append(_Surface(
                (lambda c, s: (lambda rng, n: _sample_box_surface(rng, n, c, s)))(center, size),
                area, label, base_colour))

    if template.special == "stairs":
        surfaces.extend(_stairs_surfaces(rng, ex, ey, ez, floor_id, floor_tone))

    # Point budget: the shell takes its configured share, objects split the
    # rest in proportion to surface area, with a floor of 12 points each.
    shell_frac = rng.uniform(*template.shell_fraction)
    shell_n = int(round(n_total * shell_frac))
    object_surfaces = surfaces[shell_count:]
    counts = np.zeros(len(surfaces), dtype=np.int64)

    shell_areas = np.array([s.area for s in surfaces[:shell_count]])
    counts[:shell_count] = np.maximum(
        np.rint(shell_n * shell_areas / shell_areas.sum()).astype(np.int64), 8)

    if object_surfaces:
        obj_n = max(n_total - int(counts.sum()), 12 * len(object_surfaces))
        obj_areas = np.array([s.area for s in object_surfaces])
        alloc = np.maximum(np.rint(obj_n * obj_areas / obj_areas.sum()).astype(np.int64), 12)
        counts[shell_count:] = alloc
    leftover = n_total - int(counts.sum())
    if leftover > 0:
        counts[0] += leftover  # pad the floor

    # Per-scene colour cast keeps histograms from being a fingerprint.
    cast = rng.normal(0.0, 10.0, size=3)

    positions, colours, labels = [], [], []
    for surface, count in zip(surfaces, counts):
        if count <= 0:
            continue
        pts = surface.points_fn(rng, int(count))
        positions.append(pts)
        base = tuple(float(np.clip(c + d, 0, 255)) for c, d in zip(surface.colour, cast))
        colours.append(_jitter_colour(rng, base, len(pts)))
        labels.append(np.full(len(pts), surface.label, dtype=np.int64))

    pos = np.concatenate(positions, axis=0)
    col = np.concatenate(colours, axis=0)
    lab = np.concatenate(labels, axis=0)
    if cfg.noise_sigma > 0:
        pos = pos + rng.normal(0.0, cfg.noise_sigma, size=pos.shape)

    order = rng.permutation(len(pos))
    cloud = PointCloud(positions=quantize_positions(pos[order]),
                       colours=col[order], semantic_labels=lab[order])
    return SceneSample(cloud=cloud, scene_label=class_idx,
                       scene_id=f"{scene_class}_{index:04d}")


def generate_synthetic_dataset(cfg: SynthConfig, out_dir,
                               taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> DatasetManifest:
    """Write scene files plus ``manifest.yaml`` under ``out_dir``."""
    out_dir = Path(out_dir)
    scene_dir = out_dir / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)

    missing = [c for c in taxonomy.scene_classes if c not in _TEMPLATES]
    if missing:
        raise ValueError(f"no generator template for scene classes: {missing}")

    spc = cfg.scenes_per_class
    val_n = int(round(spc * cfg.val_fraction))
    test_n = int(round(spc * cfg.test_fraction))
    train_n = spc - val_n - test_n
    if train_n < 0:
        raise ValueError("split fractions exceed scenes_per_class")

    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for scene_class in taxonomy.scene_classes:
        for index in range(spc):
            sample = generate_scene(scene_class, index, cfg, taxonomy)
            rel = f"scenes/{sample.scene_id}.txt"
            save_scene(sample, out_dir / rel, taxonomy)
            if index < train_n:
                splits["train"].append(rel)
            elif index < train_n + val_n:
                splits["val"].append(rel)
            else:
                splits["test"].append(rel)

    manifest = DatasetManifest(splits=splits, taxonomy=taxonomy, seed=cfg.seed,
                               base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.yaml")
    return manifest
