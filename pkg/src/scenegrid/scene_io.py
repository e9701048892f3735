"""Scene file format, point-cloud containers, and dataset manifests.

Scene files are line-oriented UTF-8 text so fixtures stay diff-able:

    # optional comments
    scene bathroom
    columns x y z r g b sem
    0.123456 0.200000 1.000000 210 200 190 4
    ...

Line 1 names the scene class, line 2 declares the columns (``x y z`` with
optional ``r g b`` and optional ``sem``), and every following line is one
point.  Positions are printed with 6 decimal places; colour components are
integers in [0, 255]; ``sem`` is an object-class id.  A manifest is a YAML
document with keys ``taxonomy``, ``splits.{train,val,test}`` (relative scene
paths) and ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .taxonomy import Taxonomy, DEFAULT_TAXONOMY


class SceneParseError(ValueError):
    """Malformed scene file; message names the offending line."""


class ManifestError(ValueError):
    """Malformed or inconsistent dataset manifest."""


def quantize_positions(positions: np.ndarray) -> np.ndarray:
    """Snap coordinates to the 6-decimal grid used by the text format.

    Saving is bit-exact only for positions on this grid; the synthetic
    generator quantizes at creation so save/load round-trips are identities.
    """
    flat = np.asarray(positions, dtype=np.float64).ravel()
    out = np.fromiter((float(format(v, ".6f")) for v in flat), dtype=np.float64, count=flat.size)
    return out.reshape(np.asarray(positions).shape)


@dataclass
class PointCloud:
    """One scanned scene: N positions with optional colours and labels."""

    positions: np.ndarray                     # (N, 3) float64, metres
    colours: np.ndarray | None = None         # (N, 3) uint8
    semantic_labels: np.ndarray | None = None  # (N,) int64 object-class ids

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        n = len(self.positions)
        if n < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        if self.colours is not None:
            colours = np.asarray(self.colours)
            if colours.shape != (n, 3):
                raise ValueError("colours must have shape (N, 3)")
            if colours.min() < 0 or colours.max() > 255:
                raise ValueError("colour components must lie in [0, 255]")
            self.colours = colours.astype(np.uint8)
        if self.semantic_labels is not None:
            labels = np.asarray(self.semantic_labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ValueError("semantic_labels must have shape (N,)")
            if labels.min() < 0:
                raise ValueError("semantic label ids must be non-negative")
            self.semantic_labels = labels

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, index) -> "PointCloud":
        """Subset all present arrays with the same index."""
        return PointCloud(
            positions=self.positions[index],
            colours=None if self.colours is None else self.colours[index],
            semantic_labels=None if self.semantic_labels is None else self.semantic_labels[index],
        )

    def replace_positions(self, positions: np.ndarray) -> "PointCloud":
        return PointCloud(positions=positions, colours=self.colours,
                          semantic_labels=self.semantic_labels)


@dataclass
class SceneSample:
    """A point cloud plus its scene-type supervision."""

    cloud: PointCloud
    scene_label: int
    scene_id: str

    def __post_init__(self):
        if self.scene_label < 0:
            raise ValueError("scene_label must be non-negative")


@dataclass
class DatasetManifest:
    """Named splits of scene files plus the taxonomy they were written with."""

    splits: dict[str, list[str]]
    taxonomy: Taxonomy
    seed: int | None = None
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for split, paths in self.splits.items():
            for p in paths:
                if p in seen:
                    raise ManifestError(f"path {p!r} appears in splits {seen[p]!r} and {split!r}")
                seen[p] = split

    def paths(self, split: str) -> list[Path]:
        return [self.base_dir / p for p in self.splits.get(split, [])]


def _parse_header(lines: list[tuple[int, str]], taxonomy: Taxonomy):
    if len(lines) < 3:
        raise SceneParseError("scene file needs a scene line, a columns line and at least one point")
    lineno, text = lines[0]
    parts = text.split(maxsplit=1)
    if len(parts) != 2 or parts[0] != "scene":
        raise SceneParseError(f"line {lineno}: expected 'scene <class-name>', got {text!r}")
    name = parts[1].strip()
    try:
        label = taxonomy.scene_id(name)
    except KeyError:
        raise SceneParseError(f"line {lineno}: unknown scene class name {name!r}") from None

    lineno, text = lines[1]
    tokens = text.split()
    if not tokens or tokens[0] != "columns":
        raise SceneParseError(f"line {lineno}: expected 'columns ...', got {text!r}")
    cols = tokens[1:]
    valid = (["x", "y", "z"], ["x", "y", "z", "sem"], ["x", "y", "z", "r", "g", "b"],
             ["x", "y", "z", "r", "g", "b", "sem"])
    if cols not in valid:
        raise SceneParseError(f"line {lineno}: unsupported column layout {cols}")
    return label, "r" in cols, "sem" in cols


def load_scene(path, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> SceneSample:
    """Parse one scene file into a validated :class:`SceneSample`."""
    path = Path(path)
    lines: list[tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            lines.append((lineno, text))

    label, has_colour, has_sem = _parse_header(lines, taxonomy)
    width = 3 + (3 if has_colour else 0) + (1 if has_sem else 0)

    positions, colours, labels = [], [], []
    for lineno, text in lines[2:]:
        tokens = text.split()
        if len(tokens) != width:
            raise SceneParseError(f"line {lineno}: expected {width} values, got {len(tokens)}")
        try:
            xyz = [float(t) for t in tokens[:3]]
        except ValueError:
            raise SceneParseError(f"line {lineno}: non-numeric coordinate") from None
        if not all(np.isfinite(xyz)):
            raise SceneParseError(f"line {lineno}: non-finite coordinate")
        positions.append(xyz)
        cursor = 3
        if has_colour:
            try:
                rgb = [int(t) for t in tokens[3:6]]
            except ValueError:
                raise SceneParseError(f"line {lineno}: non-integer colour value") from None
            for c in rgb:
                if not 0 <= c <= 255:
                    raise SceneParseError(f"line {lineno}: colour component {c} outside [0, 255]")
            colours.append(rgb)
            cursor = 6
        if has_sem:
            try:
                sem = int(tokens[cursor])
            except ValueError:
                raise SceneParseError(f"line {lineno}: non-integer semantic id") from None
            if not 0 <= sem < taxonomy.num_object_classes:
                raise SceneParseError(
                    f"line {lineno}: semantic id {sem} outside [0, {taxonomy.num_object_classes})")
            labels.append(sem)

    cloud = PointCloud(
        positions=np.array(positions, dtype=np.float64),
        colours=np.array(colours, dtype=np.uint8) if has_colour else None,
        semantic_labels=np.array(labels, dtype=np.int64) if has_sem else None,
    )
    return SceneSample(cloud=cloud, scene_label=label, scene_id=path.stem)


def save_scene(sample: SceneSample, path, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> None:
    """Write a scene file that parses back to an identical sample."""
    path = Path(path)
    cloud = sample.cloud
    cols = ["x", "y", "z"]
    if cloud.colours is not None:
        cols += ["r", "g", "b"]
    if cloud.semantic_labels is not None:
        cols += ["sem"]
    name = taxonomy.scene_classes[sample.scene_label]

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"scene {name}\n")
        fh.write("columns " + " ".join(cols) + "\n")
        for i in range(len(cloud)):
            row = [format(v, ".6f") for v in cloud.positions[i]]
            if cloud.colours is not None:
                row += [str(int(v)) for v in cloud.colours[i]]
            if cloud.semantic_labels is not None:
                row.append(str(int(cloud.semantic_labels[i])))
            fh.write(" ".join(row) + "\n")


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "seed": manifest.seed,
        "taxonomy": manifest.taxonomy.to_dict(),
        "splits": {k: list(v) for k, v in manifest.splits.items()},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "splits" not in doc or "taxonomy" not in doc:
        raise ManifestError(f"{path}: manifest needs 'taxonomy' and 'splits' keys")
    manifest = DatasetManifest(
        splits={k: list(v or []) for k, v in doc["splits"].items()},
        taxonomy=Taxonomy.from_dict(doc["taxonomy"]),
        seed=doc.get("seed"),
        base_dir=path.parent,
    )
    for split in manifest.splits:
        for p in manifest.paths(split):
            if not p.exists():
                raise ManifestError(f"{path}: scene file {p} listed in {split!r} does not exist")
    return manifest


def load_split(manifest: DatasetManifest, split: str) -> list[SceneSample]:
    """Load every scene of one split, in manifest order."""
    return [load_scene(p, manifest.taxonomy) for p in manifest.paths(split)]
