from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class LevelConfig:
    stride: int
    sizes: Tuple[float, ...]
    ratios: Tuple[float, ...] = (1.0,)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.sizes) * len(self.ratios)

    def to_dict(self) -> dict:
        return {"stride": self.stride, "sizes": list(self.sizes), "ratios": list(self.ratios)}

    @classmethod
    def from_dict(cls, d) -> "LevelConfig":
        return cls(int(d["stride"]), tuple(float(s) for s in d["sizes"]), tuple(float(r) for r in d.get("ratios", (1.0,))))


DEFAULT_LEVELS = (
    LevelConfig(8, (16.0, 24.0), (1.0, 0.5, 2.0)),
    LevelConfig(16, (32.0, 48.0), (1.0, 0.5, 2.0)),
    LevelConfig(32, (64.0, 96.0), (1.0, 0.5, 2.0)),
)


@dataclass
class AnchorGrid:
    """Anchors of every level, center form ``(cx, cy, w, h)``.

    Within a level anchors are ordered row-major over cells, then by size,
    then by ratio, so anchor ``n`` of a level lives in cell
    ``n // anchors_per_cell``.
    """

    image_size: Tuple[int, int]
    levels: Tuple[LevelConfig, ...]
    grid_shapes: List[Tuple[int, int]] = field(default_factory=list)
    centers: List[np.ndarray] = field(default_factory=list)

    @property
    def counts(self) -> List[int]:
        return [len(c) for c in self.centers]

    @property
    def offsets(self) -> List[int]:
        return [0] + list(np.cumsum(self.counts))

    def all_centers(self) -> np.ndarray:
        return np.concatenate(self.centers, axis=0)

    def all_corners(self) -> np.ndarray:
        return center_to_corner(self.all_centers())


def center_to_corner(c: np.ndarray) -> np.ndarray:
    return np.stack(
        [c[:, 0] - c[:, 2] / 2, c[:, 1] - c[:, 3] / 2, c[:, 0] + c[:, 2] / 2, c[:, 1] + c[:, 3] / 2],
        axis=1,
    )


def generate_anchors(image_size: Tuple[int, int], levels: Sequence[LevelConfig]) -> AnchorGrid:
    """Lay anchors on each level's grid, centers at ``(i + 0.5) * stride``.

    ``image_size`` is ``(height, width)``.  A ratio ``r`` is width / height at
    constant area ``size**2``.
    """
    height, width = image_size
    grid = AnchorGrid((height, width), tuple(levels))
    for lvl in levels:
        if height % lvl.stride or width % lvl.stride:
            raise ValueError(f"stride {lvl.stride} does not divide image size {image_size}")
        gh, gw = height // lvl.stride, width // lvl.stride
        shapes = []
        for size in lvl.sizes:
            for ratio in lvl.ratios:
                shapes.append((size * math.sqrt(ratio), size / math.sqrt(ratio)))
        shapes = np.array(shapes, dtype=np.float64)
        ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        cx = (xs.reshape(-1) + 0.5) * lvl.stride
        cy = (ys.reshape(-1) + 0.5) * lvl.stride
        n_cells, n_shapes = len(cx), len(shapes)
        centers = np.empty((n_cells, n_shapes, 4))
        centers[:, :, 0] = cx[:, None]
        centers[:, :, 1] = cy[:, None]
        centers[:, :, 2] = shapes[None, :, 0]
        centers[:, :, 3] = shapes[None, :, 1]
        grid.grid_shapes.append((gh, gw))
        grid.centers.append(centers.reshape(-1, 4))
    return grid
