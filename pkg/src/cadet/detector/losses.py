"""Detection losses and training-time target construction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .model import DetectorModel, DetectorOutput
from .targets import TargetAssignment, assign_targets


@dataclass
class Truths:
    """Ground truth for one image: corner boxes and training type indices."""

    boxes: torch.Tensor
    labels: torch.Tensor


@dataclass
class BatchTargets:
    anchors: List[TargetAssignment]
    # two-stage only: targets of the sampled regions, aligned with out.regions
    regions: Optional[List[TargetAssignment]] = None


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """0.5 x^2 below |x| = 1, |x| - 0.5 above; elementwise."""
    return F.smooth_l1_loss(x, torch.zeros_like(x), beta=1.0, reduction="none")


def assign_anchors(model: DetectorModel, truths: Sequence[Truths]) -> List[TargetAssignment]:
    cfg = model.config
    anchors = model.anchors
    return [assign_targets(anchors, t.boxes.to(anchors.dtype), t.labels, cfg.pos_iou, cfg.neg_iou) for t in truths]


def sample_regions(
    model: DetectorModel,
    out: DetectorOutput,
    truths: Sequence[Truths],
    generator: Optional[torch.Generator] = None,
) -> Tuple[List[torch.Tensor], List[TargetAssignment]]:
    """Proposals plus ground-truth boxes, subsampled to a fixed foreground fraction."""
    cfg = model.config
    proposals, _ = model.proposals(out, cfg.train_proposals)
    rois, assigns = [], []
    for props, t in zip(proposals, truths):
        boxes = t.boxes.to(props.dtype)
        cand = torch.cat([props, boxes], dim=0)
        a = assign_targets(cand, boxes, t.labels, cfg.pos_iou, cfg.neg_iou)
        fg = torch.nonzero(a.objectness == 1).flatten()
        bg = torch.nonzero(a.objectness == 0).flatten()
        n_fg = min(len(fg), int(cfg.roi_samples * cfg.roi_fg_fraction))
        fg = fg[torch.randperm(len(fg), generator=generator)[:n_fg]]
        n_bg = min(len(bg), cfg.roi_samples - n_fg)
        bg = bg[torch.randperm(len(bg), generator=generator)[:n_bg]]
        keep = torch.cat([fg, bg])
        rois.append(cand[keep])
        assigns.append(
            TargetAssignment(a.matched[keep], a.objectness[keep], a.regression[keep], a.type_labels[keep])
        )
    return rois, assigns


def training_forward(
    model: DetectorModel,
    images: torch.Tensor,
    truths: Sequence[Truths],
    generator: Optional[torch.Generator] = None,
    rois: Optional[List[torch.Tensor]] = None,
    region_targets: Optional[List[TargetAssignment]] = None,
) -> Tuple[DetectorOutput, BatchTargets]:
    """Forward pass plus the targets the losses need.

    Two-stage callers may pin ``rois`` and ``region_targets`` so the loss is a
    smooth function of the weights (used for gradient checks).
    """
    out = model.forward_levels(images)
    targets = BatchTargets(assign_anchors(model, truths))
    if model.config.mode == "two_stage":
        if rois is None:
            rois, region_targets = sample_regions(model, out, truths, generator)
        elif region_targets is None:
            cfg = model.config
            region_targets = [
                assign_targets(r, t.boxes.to(r.dtype), t.labels, cfg.pos_iou, cfg.neg_iou) for r, t in zip(rois, truths)
            ]
        model.forward_regions(out, rois)
        targets.regions = region_targets
    return out, targets


def _class_targets(a: TargetAssignment, class_aware: bool) -> torch.Tensor:
    if class_aware:
        return torch.where(a.objectness == 1, a.type_labels + 1, torch.zeros_like(a.type_labels))
    return a.objectness.clamp(min=0)


def _classification_loss(
    logits: torch.Tensor,
    assigns: Sequence[TargetAssignment],
    class_aware: bool,
    neg_pos_ratio: Optional[float],
) -> torch.Tensor:
    """Cross-entropy over foreground plus mined background, averaged over selected anchors."""
    terms = []
    for b, a in enumerate(assigns):
        target = _class_targets(a, class_aware)
        ce = F.cross_entropy(logits[b], target, reduction="none")
        pos = a.objectness == 1
        neg = a.objectness == 0
        if neg_pos_ratio is not None:
            n_neg = int(neg_pos_ratio * max(int(pos.sum()), 1))
            neg_ce = torch.where(neg, ce.detach(), torch.full_like(ce, -1.0))
            order = neg_ce.argsort(descending=True, stable=True)[: min(n_neg, int(neg.sum()))]
            neg = torch.zeros_like(neg)
            neg[order] = True
        terms.append(ce[pos | neg])
    sel = torch.cat(terms)
    if sel.numel() == 0:
        return logits.sum() * 0.0
    return sel.mean()


def _box_loss(offsets: torch.Tensor, assigns: Sequence[TargetAssignment]) -> torch.Tensor:
    """Smooth L1 summed over the 4 offsets, averaged over foreground entries."""
    terms = []
    for b, a in enumerate(assigns):
        fg = a.objectness == 1
        terms.append(smooth_l1(offsets[b][fg] - a.regression[fg].to(offsets[b].dtype)).sum(dim=1))
    sel = torch.cat(terms)
    if sel.numel() == 0:
        return sum(o.sum() for o in offsets) * 0.0
    return sel.mean()


def detection_loss(model: DetectorModel, out: DetectorOutput, targets: BatchTargets) -> Dict[str, torch.Tensor]:
    """Non-adversarial loss terms; ``total`` is their sum."""
    cfg = model.config
    aware = cfg.head_type == "class_aware"
    losses = {}
    if cfg.mode == "one_stage":
        losses["cls"] = _classification_loss(out.flat_logits(), targets.anchors, aware, cfg.neg_pos_ratio)
        losses["box"] = _box_loss(out.flat_offsets(), targets.anchors)
    else:
        losses["rpn_cls"] = _classification_loss(out.flat_logits(), targets.anchors, False, cfg.neg_pos_ratio)
        losses["rpn_box"] = _box_loss(out.flat_offsets(), targets.anchors)
        reg = out.regions
        per_image_logits = [reg.logits[reg.batch_index == i] for i in range(len(targets.regions))]
        per_image_offsets = [reg.offsets[reg.batch_index == i] for i in range(len(targets.regions))]
        losses["cls"] = _region_cls_loss(per_image_logits, targets.regions, aware)
        losses["box"] = _box_loss(per_image_offsets, targets.regions)
    losses["total"] = sum(v for k, v in losses.items())
    return losses


def _region_cls_loss(logits: Sequence[torch.Tensor], assigns: Sequence[TargetAssignment], aware: bool):
    terms = []
    for lg, a in zip(logits, assigns):
        keep = a.objectness >= 0
        terms.append(F.cross_entropy(lg[keep], _class_targets(a, aware)[keep], reduction="none"))
    sel = torch.cat(terms)
    if sel.numel() == 0:
        return sum(lg.sum() for lg in logits) * 0.0
    return sel.mean()


def attachment_points(
    out: DetectorOutput,
    targets: BatchTargets,
    foreground_only: bool = True,
) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Embeddings the discriminators read, with their object-type labels.

    One entry per prediction level (one-stage) or a single entry for the
    region embeddings (two-stage).  Labels are -1 for non-foreground rows,
    which only appear when ``foreground_only`` is False.
    """
    points = []
    if out.regions is not None:
        labels = torch.cat([a.type_labels for a in targets.regions])
        objectness = torch.cat([a.objectness for a in targets.regions])
        emb = out.regions.embeddings
        mask = objectness == 1 if foreground_only else objectness >= 0
        points.append((emb[mask], labels[mask]))
        return points

    start = 0
    for level in out.levels:
        n = level.logits.shape[1]
        a_per = level.anchors_per_cell
        embs, labels = [], []
        for b, a in enumerate(targets.anchors):
            obj = a.objectness[start : start + n]
            if foreground_only:
                idx = torch.nonzero(obj == 1).flatten()
                embs.append(level.embeddings[b][idx // a_per])
                labels.append(a.type_labels[start : start + n][idx])
            else:
                embs.append(level.embeddings[b])
                cell_labels = torch.full((level.embeddings.shape[1],), -1, dtype=torch.long)
                idx = torch.nonzero(obj == 1).flatten()
                cell_labels[idx // a_per] = a.type_labels[start : start + n][idx]
                labels.append(cell_labels)
        points.append((torch.cat(embs), torch.cat(labels)))
        start += n
    return points
