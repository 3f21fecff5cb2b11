"""Synthetic shapes on textured backgrounds with exact boxes.

Every object is a solid, high-contrast shape; the class is carried only by
its outline.  Boxes are the tight pixel extent of each drawn mask, so they
are exact integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..core import Annotation, BoundingBox, ClassVocabulary, DatasetIndex, ImageRecord

SHAPE_CLASSES = ("circle", "square", "triangle", "cross", "ring", "star", "hexagon", "diamond")


@dataclass
class ShapesConfig:
    num_images: int = 100
    image_size: int = 128
    classes: Tuple[str, ...] = ("circle", "square", "triangle", "cross", "ring")
    # relative sampling weight per class; uniform when None
    class_weights: Optional[Tuple[float, ...]] = None
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 14
    max_size: int = 56
    # probability that an image's objects all share one class
    single_class_prob: float = 0.5
    texture_strength: float = 0.35
    # thin open strokes: high-contrast edges that are not objects
    clutter: int = 0
    seed: int = 0
    first_image_id: int = 1

    def __post_init__(self):
        self.classes = tuple(self.classes)
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        if self.class_weights is not None and len(self.class_weights) != len(self.classes):
            raise ValueError("class_weights must match classes")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


def _regular_polygon(cx, cy, r, n, phase):
    return [(cx + r * math.cos(phase + 2 * math.pi * i / n), cy + r * math.sin(phase + 2 * math.pi * i / n)) for i in range(n)]


def _star(cx, cy, r, phase):
    pts = []
    for i in range(10):
        rr = r if i % 2 == 0 else r * 0.45
        a = phase + math.pi * i / 5
        pts.append((cx + rr * math.cos(a), cy + rr * math.sin(a)))
    return pts


def _draw_shape(draw: ImageDraw.ImageDraw, name: str, cx: float, cy: float, size: float, rng, fill: int = 255):
    r = size / 2
    phase = float(rng.uniform(0, 2 * math.pi))
    if name == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif name == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
        inner = r * 0.55
        draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)
    elif name == "square":
        draw.polygon(_regular_polygon(cx, cy, r * 1.2, 4, phase), fill=fill)
    elif name == "diamond":
        pts = [(cx, cy - r), (cx + r * 0.6, cy), (cx, cy + r), (cx - r * 0.6, cy)]
        draw.polygon(pts, fill=fill)
    elif name == "triangle":
        draw.polygon(_regular_polygon(cx, cy, r * 1.15, 3, phase), fill=fill)
    elif name == "hexagon":
        draw.polygon(_regular_polygon(cx, cy, r, 6, phase), fill=fill)
    elif name == "star":
        draw.polygon(_star(cx, cy, r * 1.1, phase), fill=fill)
    elif name == "cross":
        t = r * 0.35
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=fill)
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=fill)
    else:
        raise ValueError(name)


def _background(rng, size: int, strength: float) -> np.ndarray:
    base = rng.uniform(40, 200, size=3)
    # smooth blotches from upsampled low-resolution noise
    low = rng.normal(0, 1, size=(size // 16, size // 16, 3))
    blot = np.asarray(
        Image.fromarray(((low - low.min()) / (np.ptp(low) + 1e-9) * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR),
        dtype=np.float64,
    )
    fine = rng.normal(0, 12, size=(size, size, 3))
    img = base + strength * (blot - 127.5) * 0.6 + fine
    return img


def _draw_clutter(img: np.ndarray, rng, count: int) -> None:
    size = img.shape[0]
    for _ in range(count):
        layer = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(layer)
        width = int(rng.integers(1, 4))
        if rng.random() < 0.5:
            pts = [tuple(rng.uniform(0, size, size=2)) for _ in range(int(rng.integers(2, 5)))]
            draw.line(pts, fill=255, width=width)
        else:
            c = rng.uniform(0, size, size=2)
            r = rng.uniform(6, 30)
            start = rng.uniform(0, 360)
            draw.arc([c[0] - r, c[1] - r, c[0] + r, c[1] + r], start, start + rng.uniform(60, 270), fill=255, width=width)
        mask = np.asarray(layer) > 127
        img[mask] = rng.uniform(0, 255, size=3)


def _object_color(rng, background_mean: np.ndarray) -> np.ndarray:
    for _ in range(50):
        c = rng.uniform(0, 255, size=3)
        if np.abs(c - background_mean).mean() > 60:
            return c
    return 255 - background_mean


def render_image(rng, cfg: ShapesConfig, image_id: int):
    """Draw one image; returns (pixels uint8 HxWx3, [(class name, (x0, y0, x1, y1))])."""
    size = cfg.image_size
    img = _background(rng, size, cfg.texture_strength)
    _draw_clutter(img, rng, cfg.clutter)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    weights = None if cfg.class_weights is None else np.asarray(cfg.class_weights, float) / sum(cfg.class_weights)
    if rng.random() < cfg.single_class_prob:
        names = [cfg.classes[rng.choice(len(cfg.classes), p=weights)]] * n
    else:
        names = [cfg.classes[i] for i in rng.choice(len(cfg.classes), size=n, p=weights)]
    placed = []
    objects = []
    for name in names:
        for _ in range(30):
            s = float(rng.uniform(cfg.min_size, cfg.max_size))
            cx, cy = rng.uniform(s / 2 + 1, size - s / 2 - 1, size=2)
            box = (cx - s * 0.7, cy - s * 0.7, cx + s * 0.7, cy + s * 0.7)
            if all(box[2] < p[0] or box[0] > p[2] or box[3] < p[1] or box[1] > p[3] for p in placed):
                break
        else:
            continue
        mask_img = Image.new("L", (size, size), 0)
        _draw_shape(ImageDraw.Draw(mask_img), name, cx, cy, s, rng)
        mask = np.asarray(mask_img) > 127
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            continue
        color = _object_color(rng, img.reshape(-1, 3).mean(axis=0))
        shade = rng.normal(0, 6, size=(size, size, 3))
        img[mask] = (color + shade)[mask]
        placed.append(box)
        objects.append((name, (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)))
    pixels = np.clip(img, 0, 255).astype(np.uint8)
    return pixels, objects


def generate_shapes(cfg: ShapesConfig, vocabulary: Optional[Sequence[str]] = None):
    """Generate a dataset; returns ``(DatasetIndex, {image_id: pixels})``.

    ``vocabulary`` fixes the class-id order (defaults to ``cfg.classes``) so
    datasets with different class mixes can share ids.
    """
    names = tuple(vocabulary) if vocabulary is not None else cfg.classes
    missing = set(cfg.classes) - set(names)
    if missing:
        raise ValueError(f"vocabulary lacks generated classes {sorted(missing)}")
    vocab = ClassVocabulary(names)
    rng = np.random.default_rng(cfg.seed)
    images, anns, pixels = [], [], {}
    for i in range(cfg.num_images):
        image_id = cfg.first_image_id + i
        px, objects = render_image(rng, cfg, image_id)
        images.append(ImageRecord(image_id, cfg.image_size, cfg.image_size, f"{image_id:06d}.png"))
        pixels[image_id] = px
        for name, box in objects:
            anns.append(Annotation(BoundingBox(*map(float, box)), vocab.index(name), image_id))
    return DatasetIndex(images, anns, vocab), pixels
