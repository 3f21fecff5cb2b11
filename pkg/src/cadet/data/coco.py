"""COCO-format annotation ingestion and export."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
from PIL import Image

from ..core import Annotation, BoundingBox, ClassVocabulary, DatasetIndex, ImageRecord, clip_box
from ..protocol import normalize_name

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset input."""


def _require(obj: Mapping, key: str, where: str):
    if not isinstance(obj, Mapping) or key not in obj:
        raise DatasetError(f"{where}: missing key {key!r}")
    return obj[key]


def parse_coco(doc: Mapping, aliases: Optional[Mapping[str, str]] = None, source: str = "<memory>") -> DatasetIndex:
    """Build a :class:`DatasetIndex` from a decoded COCO annotation document.

    Category ids are remapped to contiguous class ids in ascending id order;
    boxes go from ``(x, y, w, h)`` to corner form and are clipped to the
    image.  Boxes that end up with zero area are dropped.
    """
    cats = sorted(_require(doc, "categories", source), key=lambda c: _require(c, "id", f"{source} category"))
    cat_to_class: Dict[int, int] = {}
    names = []
    raw_aliases = {}
    for c in cats:
        raw = str(_require(c, "name", f"{source} category {c['id']}"))
        name = normalize_name(raw, aliases)
        if name in names:
            raise DatasetError(f"{source}: categories collide after normalization: {name!r}")
        cat_to_class[int(c["id"])] = len(names)
        names.append(name)
        if raw != name:
            raw_aliases[raw] = name
    vocab = ClassVocabulary(tuple(names), raw_aliases)

    images = []
    sizes = {}
    for i, im in enumerate(_require(doc, "images", source)):
        where = f"{source} images[{i}]"
        image_id = int(_require(im, "id", where))
        w, h = int(_require(im, "width", where)), int(_require(im, "height", where))
        if w <= 0 or h <= 0:
            raise DatasetError(f"{where}: non-positive image size")
        if image_id in sizes:
            raise DatasetError(f"{where}: duplicate image id {image_id}")
        sizes[image_id] = (w, h)
        images.append(ImageRecord(image_id, w, h, str(im.get("file_name", ""))))

    anns = []
    dropped = 0
    for i, a in enumerate(_require(doc, "annotations", source)):
        where = f"{source} annotations[{i}]"
        image_id = int(_require(a, "image_id", where))
        cat = int(_require(a, "category_id", where))
        bbox = _require(a, "bbox", where)
        if image_id not in sizes:
            raise DatasetError(f"{where}: unknown image id {image_id}")
        if cat not in cat_to_class:
            raise DatasetError(f"{where}: category id {cat} out of range")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise DatasetError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w < 0 or h < 0:
            raise DatasetError(f"{where}: negative bbox size")
        box = clip_box(BoundingBox.from_xywh(x, y, w, h), *sizes[image_id])
        if box.area <= 0:
            dropped += 1
            continue
        anns.append(Annotation(box, cat_to_class[cat], image_id, bool(a.get("iscrowd", 0))))
    if dropped:
        log.warning("%s: dropped %d zero-area annotations", source, dropped)
    return DatasetIndex(images, anns, vocab)


def load_coco_json(path, aliases: Optional[Mapping[str, str]] = None) -> DatasetIndex:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at byte offset {exc.pos} (line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise DatasetError(f"{path}: not UTF-8 at byte offset {exc.start}") from None
    return parse_coco(doc, aliases, str(path))


def to_coco(index: DatasetIndex) -> dict:
    images = [
        {"id": im.image_id, "width": im.width, "height": im.height, "file_name": im.file_name} for im in index.images
    ]
    anns = []
    for i, a in enumerate(index.annotations, start=1):
        b = a.box
        anns.append(
            {
                "id": i,
                "image_id": a.image_id,
                "category_id": a.class_id + 1,
                "bbox": [b.x_min, b.y_min, b.width, b.height],
                "area": b.area,
                "iscrowd": int(a.is_crowd),
            }
        )
    cats = [{"id": i + 1, "name": n} for i, n in enumerate(index.vocabulary.names)]
    return {"images": images, "annotations": anns, "categories": cats}


def save_coco_json(index: DatasetIndex, path) -> None:
    Path(path).write_text(json.dumps(to_coco(index), indent=1) + "\n")


def save_images(pixels: Mapping[int, np.ndarray], index: DatasetIndex, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for im in index.images:
        Image.fromarray(pixels[im.image_id]).save(root / im.file_name)


def load_images(index: DatasetIndex, root) -> Dict[int, np.ndarray]:
    """Decode every image of ``index`` from ``root`` into RGB uint8 arrays."""
    root = Path(root)
    out = {}
    for im in index.images:
        path = root / im.file_name
        try:
            with Image.open(path) as f:
                arr = np.asarray(f.convert("RGB"))
        except OSError as exc:
            raise DatasetError(f"cannot read image {path}: {exc}") from None
        if arr.shape[:2] != (im.height, im.width):
            raise DatasetError(f"{path}: size {arr.shape[1]}x{arr.shape[0]} differs from annotation {im.width}x{im.height}")
        out[im.image_id] = arr
    return out
