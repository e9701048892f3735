"""Scene and object class taxonomies.

The default taxonomy has 21 scene types of which a 13-class subset is used
for evaluation averages, plus 20 object classes for the segmentation head.
Both lists are configuration, not hard-coded constants: loaders accept any
taxonomy that satisfies the invariants below.
"""

from __future__ import annotations

from dataclasses import dataclass, field


# The 13 evaluated scene types plus 8 additional indoor types.
DEFAULT_SCENE_CLASSES = (
    "apartment",
    "bathroom",
    "bedroom",
    "classroom",
    "closet",
    "computer_cluster",
    "conference_room",
    "copy_room",
    "dining_room",
    "game_room",
    "gym",
    "hallway",
    "kitchen",
    "laundry_room",
    "library",
    "living_room",
    "lobby",
    "misc",
    "office",
    "stairs",
    "storage",
)

DEFAULT_EVAL_SUBSET = (
    "apartment",
    "bathroom",
    "bedroom",
    "conference_room",
    "copy_room",
    "hallway",
    "kitchen",
    "laundry_room",
    "library",
    "living_room",
    "misc",
    "office",
    "storage",
)

DEFAULT_OBJECT_CLASSES = (
    "wall",
    "floor",
    "cabinet",
    "bed",
    "chair",
    "sofa",
    "table",
    "door",
    "window",
    "bookshelf",
    "picture",
    "counter",
    "desk",
    "curtain",
    "refrigerator",
    "shower_curtain",
    "toilet",
    "sink",
    "bathtub",
    "otherfurniture",
)


@dataclass(frozen=True)
class Taxonomy:
    """Ordered scene/object class lists shared by every pipeline stage."""

    scene_classes: tuple[str, ...] = DEFAULT_SCENE_CLASSES
    eval_subset: tuple[str, ...] = DEFAULT_EVAL_SUBSET
    object_classes: tuple[str, ...] = DEFAULT_OBJECT_CLASSES
    _scene_ids: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if len(set(self.scene_classes)) != len(self.scene_classes):
            raise ValueError("scene class names must be unique")
        if len(set(self.object_classes)) != len(self.object_classes):
            raise ValueError("object class names must be unique")
        missing = set(self.eval_subset) - set(self.scene_classes)
        if missing:
            raise ValueError(f"eval subset not contained in scene classes: {sorted(missing)}")
        object.__setattr__(self, "_scene_ids", {n: i for i, n in enumerate(self.scene_classes)})

    @property
    def num_scene_classes(self) -> int:
        return len(self.scene_classes)

    @property
    def num_object_classes(self) -> int:
        return len(self.object_classes)

    def scene_id(self, name: str) -> int:
        try:
            return self._scene_ids[name]
        except KeyError:
            raise KeyError(f"unknown scene class {name!r}") from None

    def object_id(self, name: str) -> int:
        try:
            return self.object_classes.index(name)
        except ValueError:
            raise KeyError(f"unknown object class {name!r}") from None

    def eval_ids(self) -> list[int]:
        return [self.scene_id(n) for n in self.eval_subset]

    def to_dict(self) -> dict:
        return {
            "scene_classes": list(self.scene_classes),
            "eval_subset": list(self.eval_subset),
            "object_classes": list(self.object_classes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Taxonomy":
        return cls(
            scene_classes=tuple(data["scene_classes"]),
            eval_subset=tuple(data["eval_subset"]),
            object_classes=tuple(data["object_classes"]),
        )


DEFAULT_TAXONOMY = Taxonomy()
