import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptive_distill.boxes import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    assign_anchors,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    iou,
    iou_matrix,
    make_anchors,
)
from adaptive_distill.exceptions import InputError


def brute_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


boxes_st = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5), st.floats(0.1, 5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestIoU:
    def test_cases(self):
        assert iou([1, 1, 3, 4], [1, 1, 3, 4]) == 1.0
        assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
        assert iou([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(InputError):
            iou([0, 0, 0, 1], [0, 0, 1, 1])

    @given(boxes_st, boxes_st)
    def test_matches_brute_force(self, a, b):
        assert iou(a, b) == pytest.approx(brute_iou(a, b), abs=1e-12)
        assert iou_matrix([a], [b])[0, 0] == pytest.approx(iou(b, a), abs=1e-12)


class TestAnchors:
    def test_layout(self):
        a = make_anchors(4, 5, (1.0, 2.0, 3.0))
        assert len(a) == 4 * 5 * 3 and a.num_slots == 3
        b = a.boxes
        # row-major cell then slot: anchor 3 is cell (0, 1), slot 0
        assert tuple(b[3]) == (1.0, 0.0, 2.0, 1.0)
        # cell 5 is row 1, column 0: centre (0.5, 1.5), slot 2 has side 3
        assert tuple(b[5 * 3 + 2]) == (-1.0, 0.0, 2.0, 3.0)
        assert np.array_equal(b, make_anchors(4, 5, (1.0, 2.0, 3.0)).boxes)

    @pytest.mark.parametrize("args", [(0, 4, (1.0,)), (4, 4, ()), (4, 4, (1.0, -2.0))])
    def test_invalid(self, args):
        with pytest.raises(InputError):
            make_anchors(*args)


class TestAssignment:
    anchors = make_anchors(8, 8, (1.5, 2.5, 4.0))

    def test_no_gt(self):
        a = assign_anchors(self.anchors, np.zeros((0, 4)), [])
        assert np.all(a.status == NEGATIVE)

    def test_coincident(self):
        k = 3 * (8 * 2 + 5) + 1
        gt = self.anchors.boxes[k:k + 1]
        a = assign_anchors(self.anchors, gt, [2])
        assert a.status[k] == POSITIVE and a.class_id[k] == 2 and a.gt_index[k] == 0

    def test_forced_positive(self):
        # brute-force scan for a box whose best anchor IoU is 0.45
        target = None
        for x, w in itertools.product(np.arange(1.0, 3.0, 0.05), np.arange(0.6, 3.0, 0.05)):
            box = np.array([[x, 2.0, x + w, 2.0 + 1.5 * w]])
            best = iou_matrix(self.anchors.boxes, box).max()
            if abs(best - 0.45) < 0.01:
                target = box
                break
        assert target is not None
        a = assign_anchors(self.anchors, target, [0])
        assert a.num_positive == 1
        k = int(np.argmax(iou_matrix(self.anchors.boxes, target)[:, 0]))
        assert a.status[k] == POSITIVE

    def test_ignore_band(self):
        gt = np.array([[2.0, 2.0, 4.5, 4.5]])
        a = assign_anchors(self.anchors, gt, [1])
        best = iou_matrix(self.anchors.boxes, gt)[:, 0]
        band = (best >= 0.4) & (best < 0.5)
        forced = a.status == POSITIVE
        assert np.all(a.status[band & ~forced] == IGNORE)
        assert np.all(a.status[best < 0.4][~forced[best < 0.4]] == NEGATIVE)

    def test_tie_goes_to_lowest_index(self):
        anchors = np.array([[0, 0, 2, 2], [0, 0, 2, 2], [5, 5, 6, 6]], dtype=float)
        gt = np.array([[0, 0, 1, 0.5]])
        a = assign_anchors(anchors, gt, [0])
        assert list(a.status) == [POSITIVE, NEGATIVE, NEGATIVE]

    def test_thresholds(self):
        with pytest.raises(InputError):
            assign_anchors(self.anchors, np.zeros((0, 4)), [], t_pos=0.3, t_neg=0.4)

    @given(st.lists(boxes_st, min_size=1, max_size=5))
    def test_positives_cover_gts(self, boxes):
        gt = np.clip(np.array(boxes), 0, 8)
        gt = gt[(gt[:, 2] > gt[:, 0] + 1e-3) & (gt[:, 3] > gt[:, 1] + 1e-3)]
        a = assign_anchors(self.anchors, gt, np.zeros(len(gt), dtype=int))
        overlapping = (iou_matrix(self.anchors.boxes, gt).max(axis=0) > 0).sum() if len(gt) else 0
        assert a.num_positive >= overlapping


class TestCoding:
    def test_identity(self):
        assert encode_box([1, 1, 3, 3], [1, 1, 3, 3]) == (0.0, 0.0, 0.0, 0.0)

    def test_reference(self):
        # anchor centre (5, 5) size 2, gt centred at (6, 5)
        assert encode_box([4, 4, 6, 6], [5, 4, 7, 6]) == pytest.approx((0.5, 0.0, 0.0, 0.0), abs=1e-15)

    def test_invalid(self):
        with pytest.raises(InputError):
            encode_box([0, 0, 0, 1], [0, 0, 1, 1])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        anchors = make_anchors(6, 6, (1.0, 3.0)).boxes
        xy = rng.uniform(0, 10, (len(anchors), 2))
        wh = rng.uniform(0.1, 6, (len(anchors), 2))
        gts = np.hstack([xy, xy + wh])
        back = decode_boxes(anchors, encode_boxes(anchors, gts))
        assert np.max(np.abs(back - gts)) < 1e-9
        assert decode_box([4, 4, 6, 6], (0.5, 0, 0, 0)) == pytest.approx((5, 4, 7, 6))
