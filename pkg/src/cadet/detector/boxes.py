"""Box regression parameterization and suppression on tensors."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torchvision.ops import box_iou
from torchvision.ops import nms as _tv_nms

from ..core import BoundingBox

# keeps exp() of predicted log-scales finite
MAX_LOG_SCALE = math.log(1000.0 / 16)


def encode(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Offsets ``(dcx / w_a, dcy / h_a, log(w / w_a), log(h / h_a))``; corner-form inputs."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return torch.stack([(bcx - acx) / aw, (bcy - acy) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=1)


def decode(anchors: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    acx = anchors[..., 0] + 0.5 * aw
    acy = anchors[..., 1] + 0.5 * ah
    cx = acx + offsets[..., 0] * aw
    cy = acy + offsets[..., 1] * ah
    w = aw * torch.exp(offsets[..., 2].clamp(max=MAX_LOG_SCALE))
    h = ah * torch.exp(offsets[..., 3].clamp(max=MAX_LOG_SCALE))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def encode_box(anchor: BoundingBox, truth: BoundingBox) -> tuple:
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError("anchor must have positive area")
    if truth.width <= 0 or truth.height <= 0:
        raise ValueError("cannot encode a box with non-positive width or height")
    a = torch.tensor([anchor.as_tuple()], dtype=torch.float64)
    b = torch.tensor([truth.as_tuple()], dtype=torch.float64)
    return tuple(encode(a, b)[0].tolist())


def decode_box(anchor: BoundingBox, offsets: Sequence[float]) -> BoundingBox:
    a = torch.tensor([anchor.as_tuple()], dtype=torch.float64)
    o = torch.tensor([list(offsets)], dtype=torch.float64)
    return BoundingBox(*decode(a, o)[0].tolist())


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.numel() == 0 or b.numel() == 0:
        return a.new_zeros((a.shape[0], b.shape[0]))
    return box_iou(a, b)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float = 0.5) -> torch.Tensor:
    """Indices kept by greedy suppression (IoU strictly above threshold), by descending score."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    return _tv_nms(boxes.float(), scores.float(), iou_threshold)


def clip(boxes: torch.Tensor, height: float, width: float) -> torch.Tensor:
    x = boxes[..., 0::2].clamp(0, width)
    y = boxes[..., 1::2].clamp(0, height)
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], dim=-1)
