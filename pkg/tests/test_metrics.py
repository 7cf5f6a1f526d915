"""Tests for OKS, the COCO AP suite, PCKh and per-keypoint MOTA."""

import numpy as np
import pytest

from hrpose.config import MPII_JOINT_GROUPS, OKS_THRESHOLDS, RECALL_THRESHOLDS
from hrpose.errors import MetricError
from hrpose.metrics import (
    HeadNormalizedRule, PersonInstance, PixelRadiusRule, coco_ap_suite, head_size, mota, oks, oks_matrix, pckh,
)

from .conftest import make_person


FALLOFF = [0.1] * 5


def pose(dx=0.0, dy=0.0):
    base = np.array([[20.0, 10.0], [10.0, 30.0], [30.0, 30.0], [15.0, 60.0], [25.0, 60.0]])
    return base + [dx, dy]


class TestOKS:

    def test_identical_pose_scores_one(self):
        gt = make_person(pose(), area=5000.0)
        assert oks(gt, make_person(pose())) == pytest.approx(1.0)

    def test_matches_formula(self, rng):
        gt_points = rng.uniform(0, 100, size=(5, 2))
        dt_points = gt_points + rng.normal(scale=5.0, size=(5, 2))
        visibility = np.array([2, 1, 0, 2, 2])
        falloff = rng.uniform(0.05, 0.2, size=5)
        gt = PersonInstance(keypoints=gt_points, visibility=visibility, area=3000.0)
        dt = PersonInstance(keypoints=dt_points, visibility=np.full(5, 2))

        total, count = 0.0, 0
        for i in range(5):
            if visibility[i] > 0:
                d2 = (dt_points[i, 0] - gt_points[i, 0]) ** 2 + (dt_points[i, 1] - gt_points[i, 1]) ** 2
                total += np.exp(-d2 / (2.0 * 3000.0 * falloff[i] ** 2))
                count += 1
        assert oks(gt, dt, falloff) == pytest.approx(total / count, abs=1e-12)

    def test_scale_invariant(self, rng):
        gt_points = rng.uniform(0, 100, size=(5, 2))
        dt_points = gt_points + rng.normal(scale=3.0, size=(5, 2))
        base = oks(make_person(gt_points, area=2000.0), make_person(dt_points))
        scaled = oks(make_person(gt_points * 3.5, area=2000.0 * 3.5 ** 2), make_person(dt_points * 3.5))
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_requires_falloff(self):
        gt = PersonInstance(keypoints=pose(), visibility=np.full(5, 2), area=100.0)
        with pytest.raises(MetricError):
            oks(gt, gt)

    def test_requires_labeled_keypoint(self):
        gt = make_person(pose(), visibility=np.zeros(5), area=100.0)
        with pytest.raises(MetricError):
            oks(gt, make_person(pose()))

    def test_requires_positive_area(self):
        with pytest.raises(MetricError):
            oks(make_person(pose(), area=0.0), make_person(pose()))

    def test_nonpositive_falloff_rejected(self):
        with pytest.raises(MetricError):
            make_person(pose(), falloff=0.0)

    def test_matrix_zero_for_unlabeled_ground_truth(self):
        gts = [make_person(pose(), area=5000.0), make_person(pose(), visibility=np.zeros(5), area=5000.0)]
        matrix = oks_matrix([make_person(pose())], gts, FALLOFF)
        np.testing.assert_allclose(matrix, [[1.0, 0.0]])


def _gt(dx=0.0):
    return make_person(pose(dx), area=5000.0)


def _dt(dx=0.0, score=1.0):
    return make_person(pose(dx), area=5000.0, score=score)


def formula_oks(gt, dt, falloff):
    total = 0.0
    for i in range(len(falloff)):
        d2 = (dt.keypoints[i, 0] - gt.keypoints[i, 0]) ** 2 + (dt.keypoints[i, 1] - gt.keypoints[i, 1]) ** 2
        total += np.exp(-d2 / (2.0 * gt.area * falloff[i] ** 2))
    return total / len(falloff)


def assignments(table, threshold, d=0, used=frozenset()):
    """Every injective detection -> ground-truth assignment, as a TP flag per detection."""
    if d == len(table):
        yield ()
        return
    for rest in assignments(table, threshold, d + 1, used):
        yield (False,) + rest
    for g, value in enumerate(table[d]):
        if g not in used and value >= threshold:
            for rest in assignments(table, threshold, d + 1, used | {g}):
                yield (True,) + rest


def exhaustive_ap(gts, dts, falloff):
    """AP per threshold from the assignment favouring the highest-scored detections."""
    num_gt = sum(len(g) for g in gts.values())
    aps = []
    for threshold in OKS_THRESHOLDS:
        ranked = []
        for image_id, image_gts in gts.items():
            image_dts = sorted(dts.get(image_id, []), key=lambda p: -p.score)
            table = [[formula_oks(gt, dt, falloff) for gt in image_gts] for dt in image_dts]
            flags = max(assignments(table, threshold))
            ranked += [(dt.score, flag) for dt, flag in zip(image_dts, flags)]
        ranked.sort(key=lambda item: -item[0])
        tp = fp = 0
        points = []
        for _, flag in ranked:
            tp, fp = tp + flag, fp + (not flag)
            points.append((tp / num_gt, tp / (tp + fp)))
        curve = [max([p for r, p in points if r >= level], default=0.0) for level in RECALL_THRESHOLDS]
        aps.append(np.mean(curve))
    return np.array(aps)


def crowd_fixture(seed):
    """Twenty people over seven images with OKS values between the thresholds, misses, duplicates and strays."""
    rng = np.random.default_rng(seed)
    levels = [0.47, 0.52, 0.57, 0.62, 0.67, 0.72, 0.77, 0.82, 0.87, 0.92, 0.97, 1.0]
    gts, placements = {}, []
    for image_id, count in enumerate([3, 3, 3, 3, 3, 3, 2]):
        gts[image_id] = [_gt(1000.0 * j) for j in range(count)]
        for j in range(count):
            draw = rng.uniform()
            if draw < 0.15:
                continue
            copies = 2 if draw > 0.85 else 1
            for level in rng.choice(levels, size=copies, replace=False):
                # uniform shift d gives OKS = exp(-d^2 / (2 * area * k^2))
                placements.append((image_id, 1000.0 * j + np.sqrt(-2.0 * 5000.0 * 0.1 ** 2 * np.log(level))))
        if image_id % 3 == 0:
            placements.append((image_id, 50000.0))
    scores = rng.permutation(np.linspace(0.05, 0.95, len(placements)))
    dts = {}
    for (image_id, dx), score in zip(placements, scores):
        dts.setdefault(image_id, []).append(_dt(dx, score=float(score)))
    return gts, dts


class TestCocoAP:

    def test_perfect_detections(self):
        gts = {1: [_gt()], 2: [_gt(), _gt(200.0)]}
        dts = {1: [_dt()], 2: [_dt(score=0.9), _dt(200.0, score=0.8)]}
        result = coco_ap_suite(gts, dts, FALLOFF)
        assert result.AP == pytest.approx(1.0)
        assert result.AR == pytest.approx(1.0)
        assert result.AP_M == pytest.approx(1.0)
        # no ground truth is large
        assert result.AP_L == -1.0
        assert result.AR_L == -1.0

    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_matches_exhaustive_assignment(self, seed):
        gts, dts = crowd_fixture(seed)
        assert sum(len(g) for g in gts.values()) == 20
        result = coco_ap_suite(gts, dts, FALLOFF)
        np.testing.assert_allclose(result.ap_per_threshold(), exhaustive_ap(gts, dts, FALLOFF), rtol=0, atol=1e-9)

    def test_hand_computed_precision_curve(self):
        # global ranking TP, FP, TP over three ground truths
        gts = {1: [_gt()], 2: [_gt()], 3: [_gt()]}
        dts = {1: [_dt(score=0.9)], 2: [_dt(1000.0, score=0.8), _dt(score=0.7)]}
        result = coco_ap_suite(gts, dts, FALLOFF)
        np.testing.assert_allclose(result.ap_per_threshold(), 56.0 / 101.0, atol=1e-9)
        assert result.AP == pytest.approx(56.0 / 101.0, abs=1e-9)
        assert result.AR == pytest.approx(2.0 / 3.0)

    def test_higher_ranked_false_positive_halves_ap(self):
        gts = {1: [_gt()]}
        dts = {1: [_dt(1000.0, score=0.9), _dt(score=0.5)]}
        result = coco_ap_suite(gts, dts, FALLOFF)
        assert result.AP == pytest.approx(0.5)
        assert result.AR == pytest.approx(1.0)

    def test_threshold_dependence(self):
        # every keypoint displaced so that OKS == 0.72
        d = np.sqrt(-2.0 * 5000.0 * 0.1 ** 2 * np.log(0.72))
        result = coco_ap_suite({1: [_gt()]}, {1: [_dt(d)]}, FALLOFF)
        assert result.AP50 == pytest.approx(1.0)
        assert result.AP75 == pytest.approx(0.0)
        assert result.AP == pytest.approx(0.5)

    def test_detections_capped_per_image(self):
        dts = [_dt(1000.0 + 100.0 * i, score=1.0 - 0.01 * i) for i in range(20)] + [_dt(score=0.01)]
        result = coco_ap_suite({1: [_gt()]}, {1: dts}, FALLOFF)
        assert result.AP == pytest.approx(0.0)
        assert result.AR == pytest.approx(0.0)

    def test_unlabeled_ground_truth_only(self):
        gt = make_person(pose(), visibility=np.zeros(5), area=5000.0)
        result = coco_ap_suite({1: [gt]}, {1: [_dt()]}, FALLOFF)
        assert result.AP == -1.0

    def test_summary_frame(self):
        result = coco_ap_suite({1: [_gt()]}, {1: [_dt()]}, FALLOFF)
        frame = result.to_frame()
        assert list(frame.columns)[:3] == ['AP', 'AP50', 'AP75']
        assert frame.loc[0, 'AR'] == pytest.approx(1.0)


def mpii_person(points, head_box=(0.0, 0.0, 30.0, 40.0), visibility=None):
    return PersonInstance(
        keypoints=points,
        visibility=np.full(16, 1) if visibility is None else visibility,
        head_box=head_box,
    )


class TestPCKh:

    def test_head_size(self):
        assert head_size((0.0, 0.0, 30.0, 40.0)) == pytest.approx(30.0)

    def test_threshold_is_inclusive(self):
        gt_points = np.zeros((16, 2))
        pred_points = gt_points + [9.0, 12.0]
        result = pckh([mpii_person(pred_points)], [mpii_person(gt_points)])
        assert result.total == 1.0

    def test_just_outside_threshold(self):
        gt_points = np.zeros((16, 2))
        result = pckh([mpii_person(gt_points + [9.0, 12.01])], [mpii_person(gt_points)])
        assert result.total == 0.0

    def test_half_displaced_wrists(self):
        gt_points = np.zeros((16, 2))
        displaced = gt_points.copy()
        displaced[MPII_JOINT_GROUPS['Wri']] = 100.0
        preds = [mpii_person(gt_points), mpii_person(displaced)]
        gts = [mpii_person(gt_points), mpii_person(gt_points)]
        percent = pckh(preds, gts).percent()
        assert percent['Wri'] == 50.0
        assert percent['Head'] == 100.0

    def test_pelvis_and_thorax_excluded_from_mean(self):
        gt_points = np.zeros((16, 2))
        pred_points = gt_points.copy()
        pred_points[[6, 7]] = 100.0
        result = pckh([mpii_person(pred_points)], [mpii_person(gt_points)])
        assert result.total == 1.0
        assert result.per_joint[6] == 0.0

    def test_unlabeled_joints_not_counted(self):
        gt_points = np.zeros((16, 2))
        pred_points = gt_points.copy()
        pred_points[0] = 100.0
        visibility = np.full(16, 1)
        visibility[0] = 0
        result = pckh([mpii_person(pred_points)], [mpii_person(gt_points, visibility=visibility)])
        assert result.counts[0] == 0
        assert np.isnan(result.per_joint[0])
        assert result.total == 1.0

    def test_missing_head_box_skipped(self):
        gt_points = np.zeros((16, 2))
        preds = [mpii_person(gt_points), mpii_person(gt_points)]
        gts = [mpii_person(gt_points), mpii_person(gt_points, head_box=None)]
        result = pckh(preds, gts)
        assert result.skipped == 1
        assert result.counts.sum() == 16

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            pckh([], [mpii_person(np.zeros((16, 2)))])


def tracked(points, track_id, head_box=(0.0, 0.0, 30.0, 40.0)):
    return PersonInstance(keypoints=points, visibility=np.full(len(points), 2), track_id=track_id, head_box=head_box)


A = np.array([[0.0, 0.0], [10.0, 0.0]])
B = np.array([[100.0, 0.0], [110.0, 0.0]])


class TestMOTA:

    def test_perfect_tracking(self):
        gt_frames = [[tracked(A, 1), tracked(B, 2)]] * 3
        pred_frames = [[tracked(A, 7), tracked(B, 8)]] * 3
        result = mota(pred_frames, gt_frames)
        assert result.total == 1.0
        np.testing.assert_array_equal(result.id_switches, [0, 0])

    def test_swapped_identities(self):
        gt_frames = [[tracked(A, 1), tracked(B, 2)], [tracked(A, 1), tracked(B, 2)]]
        pred_frames = [[tracked(A, 7), tracked(B, 8)], [tracked(A, 8), tracked(B, 7)]]
        result = mota(pred_frames, gt_frames)
        np.testing.assert_array_equal(result.id_switches, [2, 2])
        np.testing.assert_allclose(result.per_keypoint, [0.5, 0.5])
        assert result.total == pytest.approx(0.5)

    def test_single_identity_change(self):
        gt_frames = [[tracked(A, 1)], [tracked(A, 1)], [tracked(A, 1)]]
        pred_frames = [[tracked(A, 3)], [tracked(A, 4)], [tracked(A, 4)]]
        result = mota(pred_frames, gt_frames)
        np.testing.assert_array_equal(result.id_switches, [1, 1])

    def test_misses_and_false_positives(self):
        far = A + 50.0
        gt_frames = [[tracked(A, 1)], [tracked(A, 1)]]
        pred_frames = [[tracked(A, 1)], [tracked(far, 1)]]
        result = mota(pred_frames, gt_frames)
        np.testing.assert_array_equal(result.misses, [1, 1])
        np.testing.assert_array_equal(result.false_positives, [1, 1])
        np.testing.assert_array_equal(result.num_gt, [2, 2])
        assert result.total == pytest.approx(0.0)

    def test_pixel_radius_rule(self):
        gt_frames = [[tracked(A, 1, head_box=None)]]
        pred_frames = [[tracked(A + [4.0, 0.0], 1, head_box=None)]]
        assert mota(pred_frames, gt_frames, PixelRadiusRule(5.0)).total == 1.0
        assert mota(pred_frames, gt_frames, PixelRadiusRule(3.0)).total == pytest.approx(-1.0)

    def test_head_rule_needs_head_box(self):
        with pytest.raises(MetricError):
            HeadNormalizedRule().threshold(tracked(A, 1, head_box=None))

    def test_frame_count_mismatch(self):
        with pytest.raises(MetricError):
            mota([[]], [[], []])

    def test_frame_table(self):
        result = mota([[tracked(A, 1)]], [[tracked(A, 1)]])
        frame = result.to_frame(['left', 'right'])
        assert list(frame['keypoint']) == ['left', 'right']
