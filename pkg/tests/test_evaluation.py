"""Detection metrics: AP against a brute-force reference, error taxonomy,
channel distances, gradient-norm maps, and report files."""

import csv
import json
import math

import numpy as np
import pytest
import torch

import distilldet.detector as det
import distilldet.evaluation as ev
from distilldet.errors import DatasetError
from distilldet.masks import BinaryMask, make_gt_mask

from tests.oracles import map_oracle, random_scene


def scene_to_inputs(scenes):
    """Convert oracle scenes into compute_map's argument lists."""
    dets, gts = [], []
    for d, g in scenes:
        dets.append([ev.Detection(np.array(b), c, s) for b, c, s in d])
        boxes = np.array([b for b, _ in g]).reshape(-1, 4)
        labels = np.array([c for _, c in g], dtype=np.int64)
        gts.append((boxes, labels))
    return dets, gts


class TestComputeMap:
    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(4012)
        thresholds = [0.5, 0.75]
        for trial in range(60):
            scenes = [random_scene(rng) for _ in range(rng.integers(1, 4))]
            dets, gts = scene_to_inputs(scenes)
            want = map_oracle(
                [d for d, _ in scenes], [g for _, g in scenes], thresholds
            )
            got = ev.compute_map(dets, gts, thresholds)
            assert set(got.per_class) == set(want)
            for key, ap in want.items():
                if math.isnan(ap):
                    assert math.isnan(got.per_class[key])
                else:
                    assert got.per_class[key] == pytest.approx(ap, abs=1e-12)

    def test_single_perfect_detection(self):
        box = np.array([2.0, 2.0, 10.0, 10.0])
        dets = [[ev.Detection(box, 1, 0.9)]]
        got = ev.compute_map(dets, [(box.reshape(1, 4), np.array([1]))], [0.5])
        assert got.per_class[(1, 0.5)] == 1.0
        assert got.map50 == 1.0

    def test_duplicate_detection_counts_once(self):
        # second hit on the same gt is a false positive: AP = 1.0 still,
        # because the TP ranks first, but precision at rank 2 drops
        box = np.array([2.0, 2.0, 10.0, 10.0])
        dets = [[ev.Detection(box, 1, 0.9), ev.Detection(box + 0.01, 1, 0.8)]]
        got = ev.compute_map(dets, [(box.reshape(1, 4), np.array([1]))], [0.5])
        assert got.per_class[(1, 0.5)] == 1.0

    def test_missed_gt_halves_recall(self):
        box = np.array([2.0, 2.0, 10.0, 10.0])
        far = np.array([20.0, 20.0, 28.0, 28.0])
        dets = [[ev.Detection(box, 1, 0.9)]]
        got = ev.compute_map(
            dets, [(np.vstack([box, far]), np.array([1, 1]))], [0.5]
        )
        assert got.per_class[(1, 0.5)] == pytest.approx(0.5)

    def test_classes_come_from_ground_truth_only(self):
        box = np.array([2.0, 2.0, 10.0, 10.0])
        dets = [[ev.Detection(box, 7, 0.9)]]  # class never in gt
        got = ev.compute_map(dets, [(box.reshape(1, 4), np.array([1]))], [0.5])
        assert got.classes == (1,)
        assert (7, 0.5) not in got.per_class

    def test_no_detections_gives_zero_ap(self):
        box = np.array([2.0, 2.0, 10.0, 10.0])
        got = ev.compute_map([[]], [(box.reshape(1, 4), np.array([1]))], [0.5])
        assert got.per_class[(1, 0.5)] == 0.0

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            ev.compute_map([[]], [(np.zeros((0, 4)), np.zeros(0, np.int64))], [1.5])

    def test_rejects_misaligned_lists(self):
        with pytest.raises(ValueError):
            ev.compute_map([[], []], [(np.zeros((0, 4)), np.zeros(0, np.int64))], [0.5])


class TestMapResult:
    def test_at_threshold_filters_by_threshold(self):
        res = ev.MapResult(
            per_class={(1, 0.5): 0.8, (2, 0.5): 0.4, (1, 0.75): 0.2, (2, 0.75): 0.0},
            classes=(1, 2),
            thresholds=(0.5, 0.75),
        )
        assert res.at_threshold(0.5) == pytest.approx(0.6)
        assert res.map50 == pytest.approx(0.6)
        assert res.at_threshold(0.75) == pytest.approx(0.1)

    def test_map_all_averages_everything(self):
        res = ev.MapResult(
            per_class={(1, 0.5): 1.0, (1, 0.75): 0.5},
            classes=(1,),
            thresholds=(0.5, 0.75),
        )
        assert res.map_all == pytest.approx(0.75)

    def test_empty_is_nan(self):
        res = ev.MapResult(per_class={}, classes=(), thresholds=(0.5,))
        assert math.isnan(res.map50)
        assert math.isnan(res.map_all)


def make_breakdown(dets, gts, num_classes=8):
    """categorize_errors on a single synthetic image."""
    det_objs = [[ev.Detection(np.array(b, float), c, s) for b, c, s in dets]]
    boxes = np.array([b for b, _ in gts], float).reshape(-1, 4)
    labels = np.array([c for _, c in gts], dtype=np.int64)
    return ev.categorize_errors(det_objs, [(boxes, labels)], num_classes=num_classes)


class TestErrorTaxonomy:
    GT_BOX = (8.0, 8.0, 24.0, 24.0)

    def shifted(self, frac):
        """GT box shifted right so IoU is a chosen round value."""
        x1, y1, x2, y2 = self.GT_BOX
        w = x2 - x1
        dx = w * frac
        return (x1 + dx, y1, x2 + dx, y2)

    def test_correct_detection(self):
        bd = make_breakdown([(self.GT_BOX, 1, 0.9)], [(self.GT_BOX, 1)])
        assert bd.per_class[1]["Cor"] == 1
        assert bd.total("FN") == 0

    def test_localisation_error(self):
        # IoU in [0.1, 0.5), same class.  shift by 0.4·w: IoU = 0.6/1.4
        box = self.shifted(0.4)
        bd = make_breakdown([(box, 1, 0.9)], [(self.GT_BOX, 1)])
        assert bd.per_class[1]["Loc"] == 1
        assert bd.fn_per_class.get(1, 0) == 1

    def test_similar_class_same_supercategory(self):
        # classes 1 and 2 are the two triangle types
        box = self.shifted(0.4)
        bd = make_breakdown([(box, 2, 0.9)], [(self.GT_BOX, 1)])
        assert bd.per_class[2]["Sim"] == 1

    def test_other_class_different_supercategory(self):
        box = self.shifted(0.4)
        bd = make_breakdown([(box, 5, 0.9)], [(self.GT_BOX, 1)])
        assert bd.per_class[5]["Oth"] == 1

    def test_background_error(self):
        bd = make_breakdown(
            [((40.0, 40.0, 56.0, 56.0), 1, 0.9)], [(self.GT_BOX, 1)]
        )
        assert bd.per_class[1]["BG"] == 1

    def test_boundary_iou_exactly_half_is_correct(self):
        # shift w/3 -> inter = (2/3)w·h, union = (4/3)w·h, IoU = 0.5
        box = self.shifted(1.0 / 3.0)
        bd = make_breakdown([(box, 1, 0.9)], [(self.GT_BOX, 1)])
        assert bd.per_class[1]["Cor"] == 1

    def test_boundary_iou_exactly_tenth_is_not_background(self):
        # integer coordinates so the ratio is exact: 11x10 boxes with a
        # 2x10 overlap give inter 20 / union 200 = 0.1
        gt = (0.0, 0.0, 11.0, 10.0)
        box = (9.0, 0.0, 20.0, 10.0)
        bd = make_breakdown([(box, 1, 0.9)], [(gt, 1)])
        assert bd.per_class[1]["Loc"] == 1
        assert bd.per_class[1]["BG"] == 0

    def test_just_below_tenth_is_background(self):
        gt = (0.0, 0.0, 11.0, 10.0)
        box = (10.0, 0.0, 21.0, 10.0)  # overlap 1x10: IoU ~ 0.048
        bd = make_breakdown([(box, 1, 0.9)], [(gt, 1)])
        assert bd.per_class[1]["BG"] == 1

    def test_detection_on_empty_image_is_background(self):
        det_objs = [[ev.Detection(np.array(self.GT_BOX), 3, 0.9)]]
        bd = ev.categorize_errors(
            det_objs, [(np.zeros((0, 4)), np.zeros(0, np.int64))], num_classes=8
        )
        assert bd.per_class[3]["BG"] == 1

    def test_partition_is_exact(self):
        """Every detection lands in exactly one category."""
        rng = np.random.default_rng(515)
        for _ in range(50):
            scenes = [random_scene(rng, num_classes=8) for _ in range(3)]
            dets, gts = scene_to_inputs(scenes)
            bd = ev.categorize_errors(dets, gts, num_classes=8)
            n_dets = sum(len(d) for d in dets)
            assert bd.num_detections == n_dets
            n_gts = sum(len(b) for b, _ in gts)
            assert 0 <= bd.total("FN") <= n_gts

    def test_fn_counts_unclaimed_gts(self):
        far = (40.0, 40.0, 56.0, 56.0)
        bd = make_breakdown(
            [(self.GT_BOX, 1, 0.9)], [(self.GT_BOX, 1), (far, 2)]
        )
        assert bd.fn_per_class == {2: 1}
        assert bd.total("FN") == 1

    def test_rejects_out_of_range_class(self):
        with pytest.raises(DatasetError):
            make_breakdown([(self.GT_BOX, 9, 0.9)], [(self.GT_BOX, 1)], num_classes=8)


class TestPerChannelDistance:
    def test_hand_case(self):
        t = np.zeros((1, 2, 2))
        s = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        d_obj, d_bg = ev.per_channel_distance(t, s, mask)
        assert d_obj[0] == pytest.approx(1.0)
        assert d_bg[0] == pytest.approx((2.0 + 3.0 + 4.0) / 3.0)

    def test_accepts_binary_mask_object(self):
        t = np.zeros((2, 4, 4))
        s = np.ones((2, 4, 4))
        mask = BinaryMask(np.ones((4, 4)))
        d_obj, d_bg = ev.per_channel_distance(t, s, mask)
        assert np.allclose(d_obj, 1.0)
        assert np.all(np.isnan(d_bg))

    def test_empty_object_region_is_nan(self):
        t = np.zeros((3, 4, 4))
        s = np.ones((3, 4, 4))
        d_obj, d_bg = ev.per_channel_distance(t, s, np.zeros((4, 4)))
        assert np.all(np.isnan(d_obj))
        assert np.allclose(d_bg, 1.0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ev.per_channel_distance(np.zeros((1, 2, 2)), np.zeros((1, 4, 4)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ev.per_channel_distance(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((4, 4)))


class TestAggregateChannelDistance:
    def test_weights_by_cell_count_not_image(self):
        # image A: 1 object cell with diff 1; image B: 3 object cells with
        # diff 0.  Cell-weighted mean is 0.25, image-weighted would be 0.5.
        a = (np.zeros((1, 2, 2)), np.ones((1, 2, 2)),
             np.array([[1.0, 0.0], [0.0, 0.0]]))
        b = (np.zeros((1, 2, 2)), np.zeros((1, 2, 2)),
             np.array([[1.0, 1.0], [1.0, 0.0]]))
        d_obj, _ = ev.aggregate_channel_distance([a, b])
        assert d_obj[0] == pytest.approx(0.25)

    def test_matches_single_image_call(self):
        rng = np.random.default_rng(77)
        t = rng.normal(size=(3, 8, 8))
        s = rng.normal(size=(3, 8, 8))
        m = (rng.random((8, 8)) < 0.4).astype(np.float64)
        agg = ev.aggregate_channel_distance([(t, s, m)])
        single = ev.per_channel_distance(t, s, m)
        assert np.allclose(agg[0], single[0])
        assert np.allclose(agg[1], single[1])

    def test_empty_iterable_raises(self):
        with pytest.raises(ValueError):
            ev.aggregate_channel_distance([])


@pytest.fixture(scope="module")
def small_model():
    cfg = det.DetectorConfig(
        backbone_widths=(8, 16, 24, 32), neck_channels=16, head_hidden=32,
        num_classes=8, image_size=64,
    )
    torch.manual_seed(99)
    return det.MiniDetector(cfg)


class TestFeatureGradientNorms:
    def test_map_shape_and_finiteness(self, small_model, tiny_samples):
        sample = tiny_samples[0]
        norm_map, avg_obj, avg_bg = ev.feature_gradient_norms(small_model, sample)
        h = w = small_model.config.image_size // small_model.config.strides[0]
        assert norm_map.shape == (h, w)
        assert np.all(np.isfinite(norm_map))
        assert norm_map.min() >= 0.0
        assert math.isfinite(avg_obj) and avg_obj >= 0.0
        assert math.isfinite(avg_bg) and avg_bg >= 0.0

    def test_averages_recompute_from_map(self, small_model, tiny_samples):
        sample = tiny_samples[1]
        norm_map, avg_obj, avg_bg = ev.feature_gradient_norms(small_model, sample)
        mask = make_gt_mask(
            sample.boxes(), *norm_map.shape, small_model.config.strides[0]
        ).values
        assert avg_obj == pytest.approx(norm_map[mask > 0].mean())
        assert avg_bg == pytest.approx(norm_map[mask == 0].mean())

    def test_closure_gradient_matches_finite_difference(self, small_model, tiny_samples):
        """The closure really is a function of the neck values alone."""
        sample = tiny_samples[2]
        images = det.images_to_tensor([sample.image]).double()
        model = small_model.double()
        try:
            neck_values, closure = ev.neck_loss_closure(
                model, images, [sample.boxes()], [sample.labels()], num_proposals=16
            )
            neck = [n.clone().requires_grad_(True) for n in neck_values]
            loss = closure(neck)
            grads = torch.autograd.grad(loss, neck, allow_unused=True)
            rng = np.random.default_rng(6)
            for _ in range(5):
                lv = int(rng.integers(len(neck)))
                if grads[lv] is None:
                    continue
                idx = tuple(int(rng.integers(s)) for s in neck[lv].shape)
                h = 1e-3
                plus = [n.detach().clone() for n in neck]
                minus = [n.detach().clone() for n in neck]
                plus[lv][idx] += h
                minus[lv][idx] -= h
                fd = (closure(plus) - closure(minus)).item() / (2 * h)
                an = grads[lv][idx].item()
                assert an == pytest.approx(fd, abs=1e-6, rel=1e-4)
        finally:
            model.float()


class TestEmitReport:
    def test_map_csv(self, tmp_path):
        res = ev.MapResult(per_class={(1, 0.5): 0.5}, classes=[1], thresholds=[0.5])
        ev.emit_report(tmp_path, map_result=res)
        rows = list(csv.reader(open(tmp_path / "map.csv")))
        assert rows[0] == ["class", "iou_threshold", "ap"]
        assert rows[1] == ["1", "0.5", "0.500000"]

    def test_errors_csv_includes_fn_only_classes(self, tmp_path):
        bd = make_breakdown(
            [((8.0, 8.0, 24.0, 24.0), 1, 0.9)],
            [((8.0, 8.0, 24.0, 24.0), 1), ((40.0, 40.0, 56.0, 56.0), 2)],
        )
        ev.emit_report(tmp_path, errors=bd)
        rows = list(csv.reader(open(tmp_path / "errors.csv")))
        assert rows[0] == ["class", "Cor", "Loc", "Sim", "Oth", "BG", "FN"]
        by_class = {r[0]: r for r in rows[1:]}
        assert by_class["1"][1] == "1"  # Cor
        assert by_class["2"][6] == "1"  # FN for class never detected

    def test_distance_and_grad_csvs(self, tmp_path):
        ev.emit_report(
            tmp_path,
            channel_distance=(np.array([0.5]), np.array([0.25])),
            grad_norms=(0.125, 0.0625),
        )
        dist = list(csv.reader(open(tmp_path / "channel_distance.csv")))
        assert dist[1] == ["0", "0.50000000", "0.25000000"]
        grads = list(csv.reader(open(tmp_path / "grad_norms.csv")))
        assert grads[1:] == [["obj", "0.1250000000"], ["bg", "0.0625000000"]]

    def test_summary_json_round_trips(self, tmp_path):
        ev.emit_report(tmp_path, summary={"map50": 0.5, "seed": 3})
        assert json.loads((tmp_path / "summary.json").read_text()) == {
            "map50": 0.5, "seed": 3,
        }
