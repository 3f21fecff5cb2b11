import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cadet.core import BoundingBox
from cadet.detector.anchors import LevelConfig, generate_anchors
from cadet.detector.boxes import decode, decode_box, encode, encode_box, nms, pairwise_iou
from cadet.detector.targets import BACKGROUND, IGNORE, assign_targets


def random_boxes(rng, n, extent=200.0, min_side=0.5):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(min_side, extent / 2, size=(n, 2))
    return torch.tensor(np.concatenate([xy, xy + wh], axis=1), dtype=torch.float64)


def oracle_nms(boxes, scores, thr):
    """O(n^2) greedy suppression in plain Python."""

    def iou(a, b):
        w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = w * h
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / union if union > 0 else 0.0

    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    keep = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= thr for j in keep):
            keep.append(i)
    return keep


class TestEncodeDecode:
    def test_identity(self):
        box = BoundingBox(3, 4, 20, 30)
        assert encode_box(box, box) == (0.0, 0.0, 0.0, 0.0)

    def test_closed_form(self):
        offsets = encode_box(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 20, 20))
        assert offsets == pytest.approx((0.5, 0.5, math.log(2), math.log(2)), abs=1e-12)
        assert decode_box(BoundingBox(0, 0, 10, 10), offsets).as_tuple() == pytest.approx((0, 0, 20, 20), abs=1e-12)

    def test_degenerate_truth_rejected(self):
        with pytest.raises(ValueError):
            encode_box(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 5, 9))

    def test_round_trip_ten_thousand_boxes(self):
        # sides in [2, 100] keep the scale ratio under the decode clamp
        rng = np.random.default_rng(0)
        anchors = random_boxes(rng, 10_000, min_side=2.0)
        boxes = random_boxes(rng, 10_000, min_side=2.0)
        back = decode(anchors, encode(anchors, boxes))
        assert torch.max(torch.abs(back - boxes)).item() < 1e-6

    def test_float32_round_trip(self):
        rng = np.random.default_rng(1)
        anchors, boxes = random_boxes(rng, 1000, min_side=2.0).float(), random_boxes(rng, 1000, min_side=2.0).float()
        back = decode(anchors, encode(anchors, boxes))
        assert torch.max(torch.abs(back - boxes)).item() < 1e-3

    def test_huge_log_scale_stays_finite(self):
        out = decode(torch.tensor([[0.0, 0.0, 10.0, 10.0]]), torch.tensor([[0.0, 0.0, 1e4, 1e4]]))
        assert torch.isfinite(out).all()


class TestNMS:
    def test_identical_boxes_keep_one(self):
        boxes = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10]])
        assert nms(boxes, torch.tensor([0.5, 0.9])).tolist() == [1]

    def test_empty(self):
        assert nms(torch.zeros((0, 4)), torch.zeros(0)).numel() == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 20, 60).float()
        scores = torch.tensor(rng.permutation(20) / 20.0, dtype=torch.float32)
        kept = nms(boxes, scores, 0.5).tolist()
        assert kept == oracle_nms(boxes.tolist(), scores.tolist(), 0.5)

    def test_pairwise_iou_empty(self):
        assert pairwise_iou(torch.zeros((0, 4)), torch.zeros((3, 4))).shape == (0, 3)


class TestAnchors:
    def test_closed_form_layout(self):
        grid = generate_anchors((32, 32), [LevelConfig(16, (16.0,))])
        assert grid.all_centers()[:, :2].tolist() == [[8, 8], [24, 8], [8, 24], [24, 24]]
        assert grid.all_corners()[0].tolist() == [0, 0, 16, 16]

    def test_ratios_double_count(self):
        one = generate_anchors((64, 64), [LevelConfig(16, (16.0,), (1.0,))])
        two = generate_anchors((64, 64), [LevelConfig(16, (16.0,), (1.0, 2.0))])
        assert two.counts[0] == 2 * one.counts[0]

    def test_cells_per_level(self):
        grid = generate_anchors((64, 64), [LevelConfig(8, (8.0,))])
        assert grid.grid_shapes == [(8, 8)] and grid.counts == [64]

    def test_ratio_keeps_area(self):
        grid = generate_anchors((32, 32), [LevelConfig(16, (16.0,), (2.0,))])
        w, h = grid.all_centers()[0, 2:]
        assert w / h == pytest.approx(2.0) and w * h == pytest.approx(256.0)

    def test_stride_must_divide(self):
        with pytest.raises(ValueError):
            generate_anchors((30, 30), [LevelConfig(8, (8.0,))])


def oracle_assignment(anchors, truths, pos, neg):
    """Matched truth per anchor, from the IoU table written out by hand."""
    n, m = len(anchors), len(truths)
    table = [[0.0] * m for _ in range(n)]
    for i, a in enumerate(anchors):
        for j, t in enumerate(truths):
            w = max(0.0, min(a[2], t[2]) - max(a[0], t[0]))
            h = max(0.0, min(a[3], t[3]) - max(a[1], t[1]))
            inter = w * h
            union = (a[2] - a[0]) * (a[3] - a[1]) + (t[2] - t[0]) * (t[3] - t[1]) - inter
            table[i][j] = inter / union
    out = []
    for i in range(n):
        best = max(range(m), key=lambda j: (table[i][j], -j))
        v = table[i][best]
        out.append(best if v >= pos else IGNORE if v >= neg else BACKGROUND)
    for j in range(m):
        best_anchor = max(range(n), key=lambda i: (table[i][j], -i))
        out[best_anchor] = j
    return out


class TestAssignTargets:
    def test_anchor_equal_to_truth(self):
        box = torch.tensor([[10.0, 10, 30, 30]], dtype=torch.float64)
        a = assign_targets(box, box, torch.tensor([2]))
        assert a.objectness.tolist() == [1] and a.type_labels.tolist() == [2]
        assert a.regression.abs().max().item() == 0.0

    def test_forced_match_for_far_truths(self):
        anchors = torch.tensor([[0.0, 0, 4, 4], [100.0, 100, 104, 104]], dtype=torch.float64)
        truths = torch.tensor([[3.0, 3, 60, 60], [60.0, 60, 102, 102]], dtype=torch.float64)
        a = assign_targets(anchors, truths, torch.tensor([0, 1]))
        assert sorted(a.matched.tolist()) == [0, 1]

    def test_no_truths(self):
        a = assign_targets(torch.tensor([[0.0, 0, 4, 4]]), torch.zeros((0, 4)), torch.zeros(0, dtype=torch.long))
        assert a.matched.tolist() == [BACKGROUND] and a.num_foreground == 0

    def test_degenerate_truth_rejected(self):
        with pytest.raises(ValueError):
            assign_targets(torch.tensor([[0.0, 0, 4, 4]]), torch.tensor([[1.0, 1, 1, 3]]), torch.tensor([0]))

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        anchors = random_boxes(rng, 6, 40)
        truths = random_boxes(rng, 2, 40)
        a = assign_targets(anchors, truths, torch.tensor([0, 1]), pos_iou=0.5, neg_iou=0.3)
        assert a.matched.tolist() == oracle_assignment(anchors.tolist(), truths.tolist(), 0.5, 0.3)
        fg = a.matched >= 0
        assert (a.objectness[fg] == 1).all()
        assert (a.type_labels[fg] == a.matched[fg]).all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_best_anchor_goes_to_last_claimant(self, seed):
        rng = np.random.default_rng(seed)
        anchors = random_boxes(rng, int(rng.integers(3, 20)), 50)
        m = int(rng.integers(1, 3))
        truths = random_boxes(rng, m, 50)
        a = assign_targets(anchors, truths, torch.arange(m))
        best = pairwise_iou(anchors, truths).argmax(dim=0).tolist()
        for anchor in best:
            # a truth keeps its best anchor unless a later truth claims the same one
            owner = max(k for k in range(m) if best[k] == anchor)
            assert a.matched[anchor].item() == owner
