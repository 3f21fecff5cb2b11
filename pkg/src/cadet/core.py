"""Domain types and box geometry shared across the package."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2
SIZE_BUCKETS = ("small", "medium", "large")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner form, pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box: {self.as_tuple()}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_id: int
    image_id: int
    is_crowd: bool = False


@dataclass(frozen=True)
class Detection:
    """A scored box. ``class_id`` stays None for class-agnostic output."""

    box: BoundingBox
    score: float
    image_id: int
    class_id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class ClassVocabulary:
    """Canonical class names plus a raw-name alias map.

    ``names[i]`` is the class with ``class_id == i``.
    """

    names: tuple
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate canonical class names")
        missing = set(self.aliases.values()) - set(self.names)
        if missing:
            raise ValueError(f"alias targets not in vocabulary: {sorted(missing)}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def ids(self, names: Iterable[str]) -> set:
        return {self.names.index(n) for n in names}


@dataclass(frozen=True)
class DatasetIndex:
    images: tuple
    annotations: tuple
    vocabulary: ClassVocabulary

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        known = {im.image_id for im in self.images}
        n_classes = len(self.vocabulary)
        for ann in self.annotations:
            if ann.image_id not in known:
                raise ValueError(f"annotation references unknown image {ann.image_id}")
            if not 0 <= ann.class_id < n_classes:
                raise ValueError(f"class_id {ann.class_id} outside vocabulary")

    def image(self, image_id: int) -> ImageRecord:
        return self._image_map()[image_id]

    def _image_map(self) -> dict:
        cache = self.__dict__.get("_images_by_id")
        if cache is None:
            cache = {im.image_id: im for im in self.images}
            object.__setattr__(self, "_images_by_id", cache)
        return cache

    def annotations_by_image(self) -> dict:
        """Map image_id -> list of annotations, covering every image."""
        out = {im.image_id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def class_counts(self) -> dict:
        counts = {name: 0 for name in self.vocabulary.names}
        for ann in self.annotations:
            counts[self.vocabulary.names[ann.class_id]] += 1
        return counts


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def size_bucket(box: BoundingBox) -> str:
    area = box.area
    if area < SMALL_AREA:
        return "small"
    if area > LARGE_AREA:
        return "large"
    return "medium"


def clip_box(box: BoundingBox, width: float, height: float) -> BoundingBox:
    if width <= 0 or height <= 0:
        raise ValueError("clip bounds must be positive")

    def clamp(v, hi):
        return min(max(v, 0.0), hi)

    return BoundingBox(
        clamp(box.x_min, width),
        clamp(box.y_min, height),
        clamp(box.x_max, width),
        clamp(box.y_max, height),
    )
