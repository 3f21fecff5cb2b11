"""Class-agnostic recall (AR@k) and downstream accuracy metrics.

Recall matching is greedy in descending score order: each detection takes the
unmatched ground truth it overlaps most, provided the overlap clears the IoU
threshold.  Detection class ids never participate, so class-aware and
class-agnostic detectors are scored identically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import Annotation, BoundingBox, DatasetIndex, Detection, iou, size_bucket

log = logging.getLogger(__name__)

DEFAULT_K = (3, 5, 10, 20, 30, 100, 300, 1000)
DEFAULT_M = (1, 5, 10)


@dataclass
class ARCurve:
    k_values: Tuple[int, ...] = DEFAULT_K
    recalls: Tuple[float, ...] = ()
    iou_threshold: float = 0.5
    num_truths: int = 0
    # set when the filtered ground-truth set was empty
    empty: bool = False

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        self.recalls = tuple(float(r) for r in self.recalls)
        if len(self.recalls) != len(self.k_values):
            raise ValueError("recalls and k_values differ in length")

    def at(self, k: int) -> float:
        return self.recalls[self.k_values.index(k)]

    def to_dict(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "recalls": list(self.recalls),
            "iou_threshold": self.iou_threshold,
            "num_truths": self.num_truths,
            "empty": self.empty,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ARCurve":
        return cls(
            k_values=tuple(d["k_values"]),
            recalls=tuple(d["recalls"]),
            iou_threshold=d.get("iou_threshold", 0.5),
            num_truths=d.get("num_truths", 0),
            empty=d.get("empty", False),
        )


@dataclass
class DownstreamReport:
    accuracy_at_m: Dict[int, float]
    bo_accuracy: float
    uncropped_accuracy: Optional[float] = None
    gt_crop_accuracy: Optional[float] = None
    num_images: int = 0
    failures: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy_at_m": {str(m): v for m, v in sorted(self.accuracy_at_m.items())},
            "bo_accuracy": self.bo_accuracy,
            "uncropped_accuracy": self.uncropped_accuracy,
            "gt_crop_accuracy": self.gt_crop_accuracy,
            "num_images": self.num_images,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DownstreamReport":
        return cls(
            accuracy_at_m={int(m): v for m, v in d["accuracy_at_m"].items()},
            bo_accuracy=d["bo_accuracy"],
            uncropped_accuracy=d.get("uncropped_accuracy"),
            gt_crop_accuracy=d.get("gt_crop_accuracy"),
            num_images=d.get("num_images", 0),
            failures=d.get("failures", 0),
        )


@dataclass
class EvalReport:
    macro_seen: ARCurve
    macro_unseen: ARCurve
    harmonic_mean: ARCurve
    per_class: Dict[str, ARCurve] = field(default_factory=dict)
    per_size: Dict[str, ARCurve] = field(default_factory=dict)
    downstream: Optional[DownstreamReport] = None

    def to_dict(self) -> dict:
        return {
            "macro_seen": self.macro_seen.to_dict(),
            "macro_unseen": self.macro_unseen.to_dict(),
            "harmonic_mean": self.harmonic_mean.to_dict(),
            "per_class": {k: v.to_dict() for k, v in self.per_class.items()},
            "per_size": {k: v.to_dict() for k, v in self.per_size.items()},
            "downstream": None if self.downstream is None else self.downstream.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            macro_seen=ARCurve.from_dict(d["macro_seen"]),
            macro_unseen=ARCurve.from_dict(d["macro_unseen"]),
            harmonic_mean=ARCurve.from_dict(d["harmonic_mean"]),
            per_class={k: ARCurve.from_dict(v) for k, v in d.get("per_class", {}).items()},
            per_size={k: ARCurve.from_dict(v) for k, v in d.get("per_size", {}).items()},
            downstream=None if d.get("downstream") is None else DownstreamReport.from_dict(d["downstream"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes; same arithmetic as :func:`core.iou`."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((ix > 0) & (iy > 0), ix * iy, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where((inter > 0) & (union > 0), inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def _greedy_pairs(ious: np.ndarray, iou_threshold: float) -> List[Tuple[int, int]]:
    n_det, n_truth = ious.shape
    if n_det == 0 or n_truth == 0:
        return []
    taken = np.zeros(n_truth, dtype=bool)
    pairs = []
    candidates = np.flatnonzero((ious >= iou_threshold).any(axis=1))
    for d in candidates:
        row = np.where(taken, -1.0, ious[d])
        t = int(np.argmax(row))
        if row[t] >= iou_threshold:
            taken[t] = True
            pairs.append((int(d), t))
            if taken.all():
                break
    return pairs


def _boxes_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def match_greedy(
    detections: Sequence[Detection],
    truths: Sequence[Annotation],
    iou_threshold: float = 0.5,
) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching of score-sorted detections to truths.

    Returns ``(detection index, truth index)`` pairs in detection order.
    Raises ``ValueError`` if detections are not sorted by descending score.
    """
    scores = [d.score for d in detections]
    if any(s1 < s2 for s1, s2 in zip(scores, scores[1:])):
        raise ValueError("detections must be sorted by descending score")
    ious = _iou_matrix(_boxes_array(d.box for d in detections), _boxes_array(t.box for t in truths))
    return _greedy_pairs(ious, iou_threshold)


def sort_detections(detections: Sequence[Detection]) -> List[Detection]:
    # stable: equal scores keep input order
    return sorted(detections, key=lambda d: -d.score)


def ar_at_k(
    predictions: Mapping[int, Sequence[Detection]],
    truths: DatasetIndex,
    k_values: Sequence[int] = DEFAULT_K,
    iou_threshold: float = 0.5,
    class_filter: Optional[Iterable[int]] = None,
    size_filter: Optional[str] = None,
) -> ARCurve:
    """Average recall at each k over the (filtered) ground truths of ``truths``.

    Only ground truths are filtered by class or size; every detection stays
    eligible for matching.  Crowd annotations are excluded.
    """
    k_values = tuple(int(k) for k in k_values)
    if list(k_values) != sorted(k_values):
        raise ValueError("k_values must be ascending")
    max_k = max(k_values) if k_values else 0
    allowed = None if class_filter is None else set(class_filter)

    matched = np.zeros(len(k_values), dtype=np.int64)
    total = 0
    for image_id, anns in sorted(truths.annotations_by_image().items()):
        kept = [
            a
            for a in anns
            if not a.is_crowd
            and (allowed is None or a.class_id in allowed)
            and (size_filter is None or size_bucket(a.box) == size_filter)
        ]
        if not kept:
            continue
        total += len(kept)
        dets = sort_detections(predictions.get(image_id, ()))[:max_k]
        if not dets:
            continue
        ious = _iou_matrix(_boxes_array(d.box for d in dets), _boxes_array(a.box for a in kept))
        det_idx = np.array([d for d, _ in _greedy_pairs(ious, iou_threshold)], dtype=np.int64)
        for i, k in enumerate(k_values):
            matched[i] += int(np.count_nonzero(det_idx < k))

    if total == 0:
        log.warning("empty ground-truth set for AR (classes=%s, size=%s)", class_filter, size_filter)
        return ARCurve(k_values, [0.0] * len(k_values), iou_threshold, 0, empty=True)
    return ARCurve(k_values, (matched / total).tolist(), iou_threshold, total)


def harmonic_mean(seen: ARCurve, unseen: ARCurve) -> ARCurve:
    if seen.k_values != unseen.k_values:
        raise ValueError("seen and unseen curves use different k grids")
    values = []
    for s, u in zip(seen.recalls, unseen.recalls):
        values.append(0.0 if s + u == 0 else 2 * s * u / (s + u))
    return ARCurve(seen.k_values, values, seen.iou_threshold)


def accuracy_at_m(
    crops_predictions: Mapping[int, Sequence[Tuple[object, int]]],
    truths: Mapping[int, object],
    m: int,
) -> float:
    """Fraction of images where any crop ranked within the top ``m`` is correct.

    ``crops_predictions`` maps image id to ``(predicted class, rank)`` pairs with
    1-based ranks.  A truth may be a single class or a set of acceptable
    classes (images holding several objects).  Images without crops count as
    incorrect.
    """
    if not truths:
        return 0.0
    correct = 0
    for image_id, label in truths.items():
        accepted = label if isinstance(label, (set, frozenset)) else {label}
        preds = crops_predictions.get(image_id, ())
        if any(rank <= m and pred in accepted for pred, rank in preds):
            correct += 1
    return correct / len(truths)


def best_overlap_select(detections: Sequence[Detection], truth_box: BoundingBox) -> Detection:
    """Detection with the highest IoU against ``truth_box``.

    Ties go to the higher score, then to the earlier detection.
    """
    if not detections:
        raise ValueError("best_overlap_select needs at least one detection")
    best = None
    best_key = None
    for d in detections:
        key = (iou(d.box, truth_box), d.score)
        if best_key is None or key > best_key:
            best, best_key = d, key
    return best
