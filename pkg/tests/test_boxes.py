"""Box arithmetic against brute-force oracles."""

import numpy as np
import pytest

from distilldet.boxes import (
    box_area,
    clip_boxes,
    decode_deltas,
    encode_deltas,
    iou_matrix,
    nms,
)


def iou_single(a, b):
    """Scalar IoU oracle via direct interval intersection."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_oracle(boxes, scores, thr):
    """Quadratic reference: repeatedly take the best remaining box."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep, dead = [], set()
    for i in order:
        if i in dead:
            continue
        keep.append(i)
        for j in order:
            if j not in dead and iou_single(boxes[i], boxes[j]) > thr:
                dead.add(j)
    return keep


class TestIoU:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a = np.sort(rng.uniform(0, 50, size=(3, 4)), axis=-1)[:, [0, 2, 1, 3]]
            b = np.sort(rng.uniform(0, 50, size=(4, 4)), axis=-1)[:, [0, 2, 1, 3]]
            got = iou_matrix(a, b)
            want = [[iou_single(x, y) for y in b] for x in a]
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_identity_and_disjoint(self):
        box = np.array([[2.0, 3.0, 10.0, 12.0]])
        assert iou_matrix(box, box)[0, 0] == pytest.approx(1.0)
        far = np.array([[100.0, 100.0, 110.0, 105.0]])
        assert iou_matrix(box, far)[0, 0] == 0.0

    def test_degenerate_boxes_give_zero(self):
        line = np.array([[5.0, 5.0, 5.0, 9.0]])   # zero width
        box = np.array([[0.0, 0.0, 10.0, 10.0]])
        out = iou_matrix(line, box)
        assert out[0, 0] == 0.0 and np.isfinite(out).all()

    def test_half_overlap(self):
        a = np.array([[0.0, 0.0, 2.0, 2.0]])
        b = np.array([[1.0, 0.0, 3.0, 2.0]])
        # intersection 2, union 6
        assert iou_matrix(a, b)[0, 0] == pytest.approx(1 / 3)


class TestEncodeDecode:
    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            anchors = np.sort(rng.uniform(0, 60, size=(6, 4)), axis=-1)[:, [0, 2, 1, 3]]
            anchors += np.array([0, 0, 1.0, 1.0])  # guarantee positive size
            targets = anchors + rng.uniform(-3, 3, size=anchors.shape)
            targets[:, 2:] = np.maximum(targets[:, 2:], targets[:, :2] + 0.5)
            deltas = encode_deltas(anchors, targets)
            back = decode_deltas(anchors, deltas)
            np.testing.assert_allclose(back, targets, atol=1e-8)

    def test_zero_delta_is_identity(self):
        anchors = np.array([[4.0, 4.0, 12.0, 20.0]])
        out = decode_deltas(anchors, np.zeros((1, 4)))
        np.testing.assert_allclose(out, anchors, atol=1e-12)

    def test_encode_rejects_empty_anchor(self):
        bad = np.array([[5.0, 5.0, 5.0, 9.0]])
        tgt = np.array([[0.0, 0.0, 4.0, 4.0]])
        with pytest.raises(ValueError):
            encode_deltas(bad, tgt)

    def test_decode_clamps_explosive_sizes(self):
        anchors = np.array([[0.0, 0.0, 8.0, 8.0]])
        wild = np.array([[0.0, 0.0, 50.0, 50.0]])  # e^50 would overflow
        out = decode_deltas(anchors, wild)
        assert np.isfinite(out).all()


class TestNms:
    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(300):
            n = rng.integers(1, 25)
            boxes = np.sort(rng.uniform(0, 32, size=(n, 4)), axis=-1)[:, [0, 2, 1, 3]]
            scores = rng.uniform(0, 1, size=n)
            thr = float(rng.uniform(0.1, 0.9))
            got = nms(boxes, scores, thr).tolist()
            want = nms_oracle(boxes, scores, thr)
            assert got == want, f"trial {trial}: {got} != {want}"

    def test_tie_break_is_first_index(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
        scores = np.array([0.5, 0.5])
        assert nms(boxes, scores, 0.5).tolist() == [0]

    def test_keeps_everything_below_threshold(self):
        boxes = np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]])
        scores = np.array([0.9, 0.8])
        assert nms(boxes, scores, 0.5).tolist() == [0, 1]


def test_clip_boxes():
    boxes = np.array([[-5.0, 2.0, 70.0, 90.0], [1.0, 1.0, 3.0, 3.0]])
    out = clip_boxes(boxes, 64)
    np.testing.assert_allclose(out[0], [0, 2, 64, 64])
    np.testing.assert_allclose(out[1], boxes[1])


def test_box_area():
    assert box_area(np.array([[0.0, 0.0, 4.0, 5.0]]))[0] == 20.0
    assert box_area(np.array([[3.0, 3.0, 3.0, 7.0]]))[0] == 0.0
