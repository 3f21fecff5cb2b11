"""Run detectors over datasets and score them."""

from __future__ import annotations

from typing import Dict, List, Mapping

import numpy as np
import torch

from ..adversarial import probe_accuracy
from ..core import BoundingBox, DatasetIndex, Detection
from ..data.loader import TrainingSet, resize_to, to_tensor
from ..detector.losses import attachment_points, training_forward
from ..detector.model import DetectorModel


def predict_dataset(
    model: DetectorModel,
    index: DatasetIndex,
    pixels: Mapping[int, np.ndarray],
    max_detections: int = 1000,
    batch_size: int = 32,
    proposals_only: bool = False,
) -> Dict[int, List[Detection]]:
    """Detections for every image, in original image coordinates."""
    size = model.config.image_size
    model.eval()
    dtype = model.anchors.dtype
    out: Dict[int, List[Detection]] = {}
    records = list(index.images)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        resized = [resize_to(pixels[r.image_id], size) for r in chunk]
        batch = to_tensor(np.stack([px for px, _, _ in resized]), dtype=dtype)
        dets = model.infer(batch, max_detections, [r.image_id for r in chunk], proposals_only=proposals_only)
        for (px, sx, sy), rec, image_dets in zip(resized, chunk, dets):
            if sx == 1.0 and sy == 1.0:
                out[rec.image_id] = image_dets
                continue
            out[rec.image_id] = [
                Detection(
                    BoundingBox(d.box.x_min / sx, d.box.y_min / sy, d.box.x_max / sx, d.box.y_max / sy),
                    d.score,
                    d.image_id,
                    d.class_id,
                )
                for d in image_dets
            ]
    return out


def foreground_embeddings(model: DetectorModel, data: TrainingSet, batch_size: int = 32, seed: int = 0):
    """Frozen embeddings at every foreground attachment point, with their type labels.

    These are exactly the inputs a discriminator sees during training.
    Two-stage region sampling uses a generator seeded with ``seed``.
    """
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    features, labels = [], []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            images = to_tensor(data.images[idx], dtype=model.anchors.dtype)
            out, targets = training_forward(model, images, [data.truths(int(i)) for i in idx], generator)
            for emb, lab in attachment_points(out, targets, foreground_only=True):
                features.append(emb.double().numpy())
                labels.append(lab.numpy())
    return np.concatenate(features), np.concatenate(labels)


def type_probe(model: DetectorModel, data: TrainingSet, seed: int = 0) -> float:
    """Held-out accuracy of a linear type probe on the model's foreground embeddings."""
    features, labels = foreground_embeddings(model, data, seed=seed)
    return probe_accuracy(features, labels, seed=seed)
