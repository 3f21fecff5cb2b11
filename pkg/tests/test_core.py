import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadet.core import BoundingBox, Detection, clip_box, iou, size_bucket


def raster_iou(a, b, resolution=0.001):
    """IoU by counting cell centres of a regular grid that fall inside each box."""
    x0 = min(a[0], b[0])
    y0 = min(a[1], b[1])
    x1 = max(a[2], b[2])
    y1 = max(a[3], b[3])
    xs = np.arange(x0 + resolution / 2, x1, resolution)
    ys = np.arange(y0 + resolution / 2, y1, resolution)

    def inside(box):
        return ((xs >= box[0]) & (xs < box[2]))[None, :] & ((ys >= box[1]) & (ys < box[3]))[:, None]

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


coords = st.floats(min_value=-500, max_value=500, allow_nan=False, allow_infinity=False)
sides = st.floats(min_value=0.01, max_value=300, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coords), draw(coords), draw(sides), draw(sides)
    return BoundingBox(x, y, x + w, y + h)


class TestIoU:
    def test_identical_boxes(self):
        box = BoundingBox(0, 0, 10, 10)
        assert iou(box, box) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0

    def test_touching_edges_do_not_overlap(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(1, 0, 2, 1)) == 0.0

    def test_partial_overlap_matches_rasterization(self):
        a, b = (0, 0, 2, 2), (1, 1, 3, 3)
        value = iou(BoundingBox(*a), BoundingBox(*b))
        assert value == pytest.approx(raster_iou(a, b), abs=1e-3)
        # frozen from the raster oracle
        assert value == pytest.approx(0.14286, abs=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_pairs_match_rasterization(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(3):
            ax, ay = rng.uniform(0, 3, 2)
            bx, by = ax + rng.uniform(-1, 1), ay + rng.uniform(-1, 1)
            aw, ah, bw, bh = rng.uniform(0.2, 2, 4)
            a, b = (ax, ay, ax + aw, ay + ah), (bx, by, bx + bw, by + bh)
            assert iou(BoundingBox(*a), BoundingBox(*b)) == pytest.approx(raster_iou(a, b, 0.002), abs=3e-3)

    def test_degenerate_box_has_zero_iou(self):
        assert iou(BoundingBox(1, 1, 1, 5), BoundingBox(0, 0, 4, 4)) == 0.0

    @settings(max_examples=10_000, deadline=None)
    @given(boxes(), boxes(), st.floats(-100, 100), st.floats(-100, 100))
    def test_symmetry_range_identity_and_translation(self, a, b, dx, dy):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)
        assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(v, abs=1e-6)


class TestBoundingBox:
    def test_inverted_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(5, 0, 1, 4)

    def test_from_xywh(self):
        assert BoundingBox.from_xywh(10, 10, 5, 5) == BoundingBox(10, 10, 15, 15)

    def test_detection_score_range(self):
        with pytest.raises(ValueError):
            Detection(BoundingBox(0, 0, 1, 1), 1.5, 1)


class TestSizeBucket:
    @pytest.mark.parametrize(
        "box, bucket",
        [((0, 0, 10, 10), "small"), ((0, 0, 50, 50), "medium"), ((0, 0, 100, 100), "large")],
    )
    def test_examples(self, box, bucket):
        assert size_bucket(BoundingBox(*box)) == bucket

    def test_boundaries_are_medium(self):
        assert size_bucket(BoundingBox(0, 0, 32, 32)) == "medium"
        assert size_bucket(BoundingBox(0, 0, 96, 96)) == "medium"
        assert size_bucket(BoundingBox(0, 0, 31.99, 32)) == "small"
        assert size_bucket(BoundingBox(0, 0, 96.01, 96)) == "large"


class TestClipBox:
    @pytest.mark.parametrize(
        "box, size, expected",
        [
            ((-5, -5, 10, 10), 8, (0, 0, 8, 8)),
            ((1, 1, 3, 3), 10, (1, 1, 3, 3)),
            ((9, 9, 20, 20), 10, (9, 9, 10, 10)),
        ],
    )
    def test_examples(self, box, size, expected):
        assert clip_box(BoundingBox(*box), size, size).as_tuple() == expected

    def test_outside_box_collapses(self):
        out = clip_box(BoundingBox(20, 20, 30, 30), 10, 10)
        assert out.area == 0.0

    def test_rejects_empty_bounds(self):
        with pytest.raises(ValueError):
            clip_box(BoundingBox(0, 0, 1, 1), 0, 10)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), st.integers(1, 400), st.integers(1, 400))
    def test_idempotent_and_inside(self, box, w, h):
        once = clip_box(box, w, h)
        assert clip_box(once, w, h) == once
        assert 0 <= once.x_min <= once.x_max <= w
        assert 0 <= once.y_min <= once.y_max <= h
        assert not math.isnan(once.area)
