from __future__ import annotations

from dataclasses import dataclass

import torch

from .boxes import encode, pairwise_iou

BACKGROUND = -1
IGNORE = -2


@dataclass
class TargetAssignment:
    """Per-anchor (or per-region) training targets.

    ``matched`` holds the truth index, ``BACKGROUND`` or ``IGNORE``;
    ``objectness`` is 1 / 0 / -1 (ignored); ``type_labels`` is the truth's
    object type on foreground entries and -1 elsewhere.
    """

    matched: torch.Tensor
    objectness: torch.Tensor
    regression: torch.Tensor
    type_labels: torch.Tensor

    @property
    def foreground(self) -> torch.Tensor:
        return self.objectness == 1

    @property
    def num_foreground(self) -> int:
        return int(self.foreground.sum())


def assign_targets(
    anchors: torch.Tensor,
    truth_boxes: torch.Tensor,
    truth_labels: torch.Tensor,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
) -> TargetAssignment:
    """Match corner-form anchors to ground truths.

    An anchor is foreground when its best IoU reaches ``pos_iou`` and
    background below ``neg_iou``; in between it is ignored.  Each truth then
    claims its single best anchor regardless of threshold (later truths win
    contested anchors).  IoU ties resolve to the lower index.
    """
    n = anchors.shape[0]
    dtype = anchors.dtype
    matched = torch.full((n,), BACKGROUND, dtype=torch.long)
    objectness = torch.zeros(n, dtype=torch.long)
    regression = torch.zeros((n, 4), dtype=dtype)
    type_labels = torch.full((n,), -1, dtype=torch.long)
    if truth_boxes.numel() == 0:
        return TargetAssignment(matched, objectness, regression, type_labels)
    widths = truth_boxes[:, 2] - truth_boxes[:, 0]
    heights = truth_boxes[:, 3] - truth_boxes[:, 1]
    if (widths <= 0).any() or (heights <= 0).any():
        raise ValueError("ground-truth boxes must have positive width and height")

    ious = pairwise_iou(anchors, truth_boxes.to(dtype))
    best_iou, best_truth = ious.max(dim=1)
    matched = torch.where(best_iou >= pos_iou, best_truth, matched)
    matched = torch.where((best_iou >= neg_iou) & (best_iou < pos_iou), torch.full_like(matched, IGNORE), matched)
    best_anchor = ious.argmax(dim=0)
    for j, a in enumerate(best_anchor.tolist()):
        matched[a] = j

    fg = matched >= 0
    objectness[fg] = 1
    objectness[matched == IGNORE] = -1
    idx = matched[fg]
    regression[fg] = encode(anchors[fg], truth_boxes.to(dtype)[idx])
    type_labels[fg] = truth_labels.long()[idx]
    return TargetAssignment(matched, objectness, regression, type_labels)
