from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Mapping, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from ..core import DatasetIndex
from ..detector.losses import Truths

PIXEL_MEAN = 127.5
PIXEL_SCALE = 64.0


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``[B, H, W, 3]`` (or one ``[H, W, 3]``) to normalized ``[B, 3, H, W]``."""
    if images.ndim == 3:
        images = images[None]
    x = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    return ((x - PIXEL_MEAN) / PIXEL_SCALE).permute(0, 3, 1, 2).contiguous()


def resize_to(pixels: np.ndarray, size: int) -> Tuple[np.ndarray, float, float]:
    """Square-resize an image; returns it with the (x, y) scale factors applied."""
    h, w = pixels.shape[:2]
    if (h, w) == (size, size):
        return pixels, 1.0, 1.0
    out = np.asarray(Image.fromarray(pixels).resize((size, size), Image.BILINEAR))
    return out, size / w, size / h


@dataclass
class TrainingSet:
    """Dense arrays for training: images plus per-image truths in type-index space."""

    images: np.ndarray
    boxes: List[np.ndarray]
    labels: List[np.ndarray]
    image_ids: List[int]
    class_names: Tuple[str, ...]

    def __len__(self):
        return len(self.image_ids)

    def truths(self, i: int) -> Truths:
        return Truths(torch.from_numpy(self.boxes[i]), torch.from_numpy(self.labels[i]))


def build_training_set(
    index: DatasetIndex,
    pixels: Mapping[int, np.ndarray],
    class_names: Sequence[str],
    image_size: int,
    drop_empty: bool = True,
) -> TrainingSet:
    """Keep only annotations of ``class_names`` (crowd excluded).

    Images left without any annotation are dropped when ``drop_empty``; this
    is how unseen-class-only images leave the training set.
    """
    class_names = tuple(class_names)
    missing = set(class_names) - set(index.vocabulary.names)
    if missing:
        raise ValueError(f"training classes absent from dataset vocabulary: {sorted(missing)}")
    to_type = {index.vocabulary.index(n): i for i, n in enumerate(class_names)}
    by_image = index.annotations_by_image()
    imgs, boxes, labels, ids = [], [], [], []
    for rec in index.images:
        kept = [a for a in by_image[rec.image_id] if a.class_id in to_type and not a.is_crowd]
        if drop_empty and not kept:
            continue
        px, sx, sy = resize_to(pixels[rec.image_id], image_size)
        b = np.array([[a.box.x_min * sx, a.box.y_min * sy, a.box.x_max * sx, a.box.y_max * sy] for a in kept], dtype=np.float32)
        imgs.append(px)
        boxes.append(b.reshape(-1, 4))
        labels.append(np.array([to_type[a.class_id] for a in kept], dtype=np.int64))
        ids.append(rec.image_id)
    if not ids:
        raise ValueError("no training images remain after class filtering")
    return TrainingSet(np.stack(imgs), boxes, labels, ids, class_names)


@dataclass
class Batch:
    images: torch.Tensor
    truths: List[Truths]
    image_ids: List[int]


class BatchLoader:
    """Endless seed-deterministic batches, reshuffled every epoch."""

    def __init__(self, data: TrainingSet, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return Batch(
            to_tensor(self.data.images[idx]),
            [self.data.truths(i) for i in idx],
            [self.data.image_ids[i] for i in idx],
        )
