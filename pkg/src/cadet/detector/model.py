"""Toy anchor-based detectors: one-stage (multi-level) and two-stage (proposals + regions).

The upstream part of both detectors ends in *embeddings*: per-cell vectors
for the one-stage model and per-region vectors for the two-stage model.
Classification and box-regression heads read these tensors and nothing else,
which makes them the attachment point for object-type discriminators.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
from torchvision.ops import roi_align

from ..core import BoundingBox, Detection
from .anchors import DEFAULT_LEVELS, AnchorGrid, LevelConfig, generate_anchors
from .boxes import clip, decode, nms

MODES = ("one_stage", "two_stage")
HEAD_TYPES = ("class_aware", "class_agnostic")


@dataclass
class DetectorConfig:
    mode: str = "one_stage"
    head_type: str = "class_agnostic"
    class_names: Tuple[str, ...] = ("circle", "square", "triangle")
    image_size: int = 128
    widths: Tuple[int, ...] = (16, 32, 48, 64, 64)
    embed_dim: int = 64
    levels: Tuple[LevelConfig, ...] = DEFAULT_LEVELS
    # two-stage settings
    roi_size: int = 5
    roi_embed_dim: int = 128
    rpn_pre_nms: int = 2000
    rpn_nms_iou: float = 0.7
    train_proposals: int = 256
    proposal_cap: int = 1000
    roi_samples: int = 64
    roi_fg_fraction: float = 0.25
    # assignment / sampling
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    neg_pos_ratio: Optional[float] = 3.0
    # inference
    nms_iou: float = 0.5
    score_threshold: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.head_type not in HEAD_TYPES:
            raise ValueError(f"unknown head_type {self.head_type!r}")
        self.class_names = tuple(self.class_names)
        self.widths = tuple(self.widths)
        self.levels = tuple(l if isinstance(l, LevelConfig) else LevelConfig.from_dict(l) for l in self.levels)
        if not 1 <= len(self.levels) <= 3:
            raise ValueError("toy backbone provides 1-3 feature levels")
        for i, lvl in enumerate(self.levels):
            if lvl.stride != 8 * 2**i:
                raise ValueError(f"level {i} must have stride {8 * 2 ** i}")
        if len(self.widths) != 2 + len(self.levels):
            raise ValueError("widths needs two stem entries plus one per level")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_logits(self) -> int:
        return self.num_classes + 1 if self.head_type == "class_aware" else 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [l.to_dict() for l in self.levels]
        d["class_names"] = list(self.class_names)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "DetectorConfig":
        return cls(**d)


@dataclass
class LevelOutput:
    logits: torch.Tensor  # [B, N, K]
    offsets: torch.Tensor  # [B, N, 4]
    embeddings: torch.Tensor  # [B, cells, D]
    anchors_per_cell: int


@dataclass
class RegionOutput:
    rois: List[torch.Tensor]  # per image [R_i, 4], detached
    batch_index: torch.Tensor  # [R]
    logits: torch.Tensor  # [R, K]
    offsets: torch.Tensor  # [R, 4]
    embeddings: torch.Tensor  # [R, D]


@dataclass
class DetectorOutput:
    """``levels`` holds the one-stage heads, or the proposal heads in two-stage mode."""

    levels: List[LevelOutput]
    regions: Optional[RegionOutput] = None
    features: List[torch.Tensor] = field(default_factory=list)

    def flat_logits(self) -> torch.Tensor:
        return torch.cat([l.logits for l in self.levels], dim=1)

    def flat_offsets(self) -> torch.Tensor:
        return torch.cat([l.offsets for l in self.levels], dim=1)


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(8, cout), nn.SiLU())


class Backbone(nn.Module):
    """Strided convolution blocks; levels come out at strides 8, 16, 32."""

    def __init__(self, widths: Sequence[int], num_levels: int):
        super().__init__()
        w = list(widths)
        self.stem = nn.Sequential(_conv(3, w[0], 2), _conv(w[0], w[1], 2))
        blocks = []
        cin = w[1]
        for i in range(num_levels):
            block = _conv(cin, w[2 + i], 2)
            if i == 0:
                block = nn.Sequential(block, _conv(w[2], w[2], 1))
            blocks.append(block)
            cin = w[2 + i]
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = w[2:]

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class LevelHead(nn.Module):
    def __init__(self, cin: int, embed_dim: int, anchors_per_cell: int, num_logits: int):
        super().__init__()
        self.neck = _conv(cin, embed_dim, 1)
        self.cls = nn.Conv2d(embed_dim, anchors_per_cell * num_logits, 1)
        self.reg = nn.Conv2d(embed_dim, anchors_per_cell * 4, 1)
        self.a = anchors_per_cell
        self.k = num_logits

    def forward(self, x) -> LevelOutput:
        b = x.shape[0]
        emb = self.neck(x)
        logits = self.cls(emb).permute(0, 2, 3, 1).reshape(b, -1, self.k)
        offsets = self.reg(emb).permute(0, 2, 3, 1).reshape(b, -1, 4)
        cells = emb.permute(0, 2, 3, 1).reshape(b, -1, emb.shape[1])
        return LevelOutput(logits, offsets, cells, self.a)


class RegionHead(nn.Module):
    """Crop-and-pool on the stride-8 map, then two FC layers into the region embedding."""

    def __init__(self, cin: int, roi_size: int, embed_dim: int, num_logits: int, stride: int = 8):
        super().__init__()
        self.roi_size = roi_size
        self.scale = 1.0 / stride
        self.fc = nn.Sequential(
            nn.Linear(cin * roi_size * roi_size, embed_dim),
            nn.SiLU(),
            nn.Linear(embed_dim, embed_dim),
            nn.SiLU(),
        )
        self.cls = nn.Linear(embed_dim, num_logits)
        self.reg = nn.Linear(embed_dim, 4)

    def forward(self, feature: torch.Tensor, rois: List[torch.Tensor]) -> RegionOutput:
        rois = [r.detach().to(feature.dtype) for r in rois]
        batch_index = torch.cat([torch.full((len(r),), i, dtype=torch.long) for i, r in enumerate(rois)])
        if batch_index.numel() == 0:
            d = self.fc[0].out_features
            empty = feature.new_zeros((0, d))
            return RegionOutput(rois, batch_index, self.cls(empty), self.reg(empty), empty)
        pooled = roi_align(feature, rois, self.roi_size, spatial_scale=self.scale, sampling_ratio=2, aligned=True)
        emb = self.fc(pooled.flatten(1))
        return RegionOutput(rois, batch_index, self.cls(emb), self.reg(emb), emb)


class DetectorModel(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.widths, len(config.levels))
        level_logits = 2 if config.mode == "two_stage" else config.num_logits
        self.heads = nn.ModuleList(
            LevelHead(c, config.embed_dim, lvl.anchors_per_cell, level_logits)
            for c, lvl in zip(self.backbone.out_channels, config.levels)
        )
        if config.mode == "two_stage":
            self.region_head = RegionHead(
                self.backbone.out_channels[0], config.roi_size, config.roi_embed_dim, config.num_logits
            )
        else:
            self.region_head = None
        size = config.image_size
        self.anchor_grid: AnchorGrid = generate_anchors((size, size), config.levels)
        self.register_buffer("anchors", torch.as_tensor(self.anchor_grid.all_corners(), dtype=torch.float32))
        self.discriminators = None

    # discriminators live on the model only while training

    def attach_discriminators(self, discriminators: nn.Module) -> None:
        self.discriminators = discriminators

    def detach_discriminators(self) -> Optional[nn.Module]:
        d, self.discriminators = self.discriminators, None
        return d

    def detector_parameters(self):
        """Parameters of the detector proper, excluding any attached discriminator."""
        for name, p in self.named_parameters():
            if not name.startswith("discriminators."):
                yield p

    @property
    def embedding_dim(self) -> int:
        if self.config.mode == "two_stage":
            return self.config.roi_embed_dim
        return self.config.embed_dim

    def classification_head_prefixes(self) -> Tuple[str, ...]:
        if self.config.mode == "two_stage":
            return ("region_head.cls.",)
        return tuple(f"heads.{i}.cls." for i in range(len(self.heads)))

    def forward(self, images: torch.Tensor, rois: Optional[List[torch.Tensor]] = None) -> DetectorOutput:
        size = self.config.image_size
        if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (size, size):
            raise ValueError(f"expected images of shape [B, 3, {size}, {size}], got {tuple(images.shape)}")
        out = self.forward_levels(images)
        if self.region_head is not None:
            if rois is None:
                rois = self.proposals(out, self.config.proposal_cap)[0]
            self.forward_regions(out, rois)
        return out

    def forward_levels(self, images: torch.Tensor) -> DetectorOutput:
        feats = self.backbone(images)
        levels = [head(f) for head, f in zip(self.heads, feats)]
        return DetectorOutput(levels, features=feats)

    def forward_regions(self, out: DetectorOutput, rois: List[torch.Tensor]) -> DetectorOutput:
        out.regions = self.region_head(out.features[0], rois)
        return out

    @torch.no_grad()
    def proposals(self, out: DetectorOutput, limit: int) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        """Decoded, clipped, suppressed proposal boxes and objectness per image."""
        cfg = self.config
        logits = out.flat_logits().detach()
        offsets = out.flat_offsets().detach()
        scores = logits.softmax(-1)[..., 1]
        boxes = clip(decode(self.anchors.to(offsets.dtype), offsets), cfg.image_size, cfg.image_size)
        all_boxes, all_scores = [], []
        for b in range(logits.shape[0]):
            s, bx = scores[b], boxes[b]
            keep = _valid(bx)
            s, bx = s[keep], bx[keep]
            top = s.argsort(descending=True)[: cfg.rpn_pre_nms]
            s, bx = s[top], bx[top]
            k = nms(bx, s, cfg.rpn_nms_iou)[:limit]
            all_boxes.append(bx[k])
            all_scores.append(s[k])
        return all_boxes, all_scores

    @torch.no_grad()
    def infer(self, images: torch.Tensor, max_detections: int = 1000, image_ids=None, proposals_only: bool = False):
        """Scored, suppressed detections per image; discriminators are never run.

        ``proposals_only`` returns the raw proposal boxes of a two-stage model.
        """
        cfg = self.config
        if images.dim() == 3:
            images = images[None]
        image_ids = list(range(len(images))) if image_ids is None else list(image_ids)
        if max_detections <= 0:
            return [[] for _ in image_ids]
        out = self.forward_levels(images)
        results = []
        if cfg.mode == "two_stage":
            props, prop_scores = self.proposals(out, cfg.proposal_cap)
            if proposals_only:
                for i, (bx, s) in enumerate(zip(props, prop_scores)):
                    results.append(_to_detections(bx[:max_detections], s[:max_detections], None, image_ids[i]))
                return results
            regions = self.forward_regions(out, props).regions
            probs = regions.logits.softmax(-1)
            boxes = clip(decode(torch.cat(props).to(regions.offsets.dtype), regions.offsets), cfg.image_size, cfg.image_size)
            per_image = [(boxes[regions.batch_index == i], probs[regions.batch_index == i]) for i in range(len(images))]
        else:
            if proposals_only:
                raise ValueError("one-stage detectors have no proposal stage")
            probs = out.flat_logits().softmax(-1)
            boxes = clip(decode(self.anchors.to(probs.dtype), out.flat_offsets()), cfg.image_size, cfg.image_size)
            per_image = [(boxes[i], probs[i]) for i in range(len(images))]

        for i, (bx, p) in enumerate(per_image):
            if cfg.head_type == "class_aware":
                score, cls = p[:, 1:].max(dim=1)
            else:
                score, cls = p[:, 1], None
            keep = _valid(bx) & (score >= cfg.score_threshold)
            bx, score = bx[keep], score[keep]
            cls = cls[keep] if cls is not None else None
            k = nms(bx, score, cfg.nms_iou)[:max_detections]
            results.append(_to_detections(bx[k], score[k], None if cls is None else cls[k], image_ids[i]))
        return results


def _valid(boxes: torch.Tensor) -> torch.Tensor:
    return ((boxes[:, 2] - boxes[:, 0]) > 1e-3) & ((boxes[:, 3] - boxes[:, 1]) > 1e-3)


def _to_detections(boxes, scores, classes, image_id) -> List[Detection]:
    out = []
    boxes = boxes.double().tolist()
    scores = scores.double().clamp(0, 1).tolist()
    classes = classes.tolist() if classes is not None else [None] * len(scores)
    for b, s, c in zip(boxes, scores, classes):
        out.append(Detection(BoundingBox(*b), s, image_id, c))
    return out


def init_from_class_aware(model: DetectorModel, aware_state: dict) -> DetectorModel:
    """Copy every weight of a class-aware checkpoint except the classification head."""
    skip = model.classification_head_prefixes()
    own = model.state_dict()
    for name, value in aware_state.items():
        if name.startswith(skip) or name.startswith("discriminators."):
            continue
        if name not in own or own[name].shape != value.shape:
            raise ValueError(f"incompatible weight {name!r} in class-aware checkpoint")
        own[name] = value.clone()
    model.load_state_dict(own)
    return model
