import math

import numpy as np
import pytest

from weakalign_det.core.errors import ConfigurationError, MetricError
from weakalign_det.data.schemas import Illumination, Modality, Occlusion, PairedObject
from weakalign_det.detector.inference import DetectionResult
from weakalign_det.evaluation.average_precision import average_precision, mean_average_precision
from weakalign_det.evaluation.matching import (
    ALL_OBJECTS,
    EvalFilter,
    GroundTruth,
    MatchStatus,
    ScoredDetection,
    greedy_match,
    image_ground_truth,
)
from weakalign_det.evaluation.miss_rate import (
    log_average,
    log_average_miss_rate,
    modality_mr,
    mr_by_subset,
    reference_fppi,
)
from weakalign_det.evaluation.robustness import (
    DetectorEvaluator,
    Metric,
    MetricKind,
    degradation_rate,
    directional_shifts,
    directional_stats,
    grid_shifts,
    metric_kind,
    proposal_recall,
    robustness_sweep,
    score_detections,
    shift_prediction_error,
    spaced_magnitudes,
    weak_aligned_bound,
)
from weakalign_det.geometry.boxes import iou
from weakalign_det.tests.conftest import blank_scene, box

A, B, C = box(10, 10), box(40, 10), box(20, 40)
X, Y = box(50, 50), box(30, 20)


def _det(b, score, label="pedestrian"):
    return ScoredDetection(b, score, label)


def _gt(b, ignore=False, label="pedestrian"):
    return GroundTruth(b, label, ignore)


def _example():
    detections = [[_det(A, 0.9), _det(X, 0.8), _det(B, 0.3)], [_det(Y, 0.7)]]
    ground_truth = [[_gt(A), _gt(B)], [_gt(C)]]
    return detections, ground_truth


class TestGreedyMatch:
    def test_higher_score_takes_the_ground_truth(self):
        status = greedy_match([_det(A, 0.4), _det(A, 0.8)], [_gt(A)])
        assert status == [MatchStatus.FALSE_POSITIVE, MatchStatus.TRUE_POSITIVE]

    def test_ignore_region_absorbs_detections(self):
        status = greedy_match([_det(A, 0.5), _det(A, 0.6)], [_gt(A, ignore=True)])
        assert status == [MatchStatus.IGNORED, MatchStatus.IGNORED]

    def test_counted_ground_truth_wins_over_ignore(self):
        status = greedy_match([_det(A, 0.5)], [_gt(A, ignore=True), _gt(A)])
        assert status == [MatchStatus.TRUE_POSITIVE]

    def test_below_threshold(self):
        assert greedy_match([_det(box(14, 10), 0.5)], [_gt(A)], iou_thresh=0.5) == [MatchStatus.FALSE_POSITIVE]


class TestGroundTruthSelection:
    def test_missing_modality_box_becomes_ignore_region(self):
        objects = [
            PairedObject(pair_id=0, class_label="pedestrian", sensed_box=B, unpaired=True),
            PairedObject(pair_id=1, class_label="pedestrian", ref_box=A, sensed_box=A),
        ]
        gts = image_ground_truth(objects, Modality.REF, ALL_OBJECTS)
        assert [(g.box, g.ignore) for g in gts] == [(B, True), (A, False)]

    def test_filter(self):
        tall = box(30, 30, 20, 60)
        objects = [
            PairedObject(pair_id=0, class_label="pedestrian", ref_box=tall, sensed_box=tall),
            PairedObject(pair_id=1, class_label="pedestrian", ref_box=A, sensed_box=A),
            PairedObject(
                pair_id=2, class_label="pedestrian", ref_box=tall, sensed_box=tall, occlusion=Occlusion.HEAVY
            ),
        ]
        gts = image_ground_truth(objects, Modality.REF, EvalFilter())
        assert [g.ignore for g in gts] == [False, True, True]


class TestMissRate:
    def test_matches_hand_computed_value(self):
        detections, ground_truth = _example()
        result = log_average_miss_rate(detections, ground_truth)
        expected = math.exp((8 * math.log(2 / 3) + math.log(1 / 3)) / 9)
        assert result.mr == pytest.approx(expected)
        assert result.samples[:8] == pytest.approx([2 / 3] * 8)
        assert result.fppi[0] == 0.0 and result.miss_rate[0] == 1.0

    def test_ignored_detection_changes_nothing(self):
        detections, ground_truth = _example()
        base = log_average_miss_rate(detections, ground_truth).mr
        detections[1].append(_det(X, 0.95))
        ground_truth[1].append(_gt(X, ignore=True))
        assert log_average_miss_rate(detections, ground_truth).mr == pytest.approx(base)

    def test_perfect_detector(self):
        ground_truth = [[_gt(A), _gt(B)], [_gt(C)]]
        detections = [[_det(A, 1.0), _det(B, 1.0)], [_det(C, 1.0)]]
        assert log_average_miss_rate(detections, ground_truth).mr == 0.0

    def test_no_detections(self):
        assert log_average_miss_rate([[], []], [[_gt(A)], [_gt(B)]]).mr == 1.0

    def test_undefined_without_ground_truth(self):
        with pytest.raises(MetricError):
            log_average_miss_rate([[_det(A, 0.5)]], [[_gt(A, ignore=True)]])

    def test_reference_points(self):
        refs = reference_fppi()
        assert len(refs) == 9
        assert refs[0] == pytest.approx(0.01) and refs[-1] == pytest.approx(1.0)

    def test_log_average_of_a_zero(self):
        assert log_average(np.array([0.5, 0.0, 0.25])) == 0.0

    def test_subsets(self):
        day = blank_scene([PairedObject(pair_id=0, class_label="pedestrian", ref_box=A, sensed_box=A)], "d")
        night = blank_scene([], "n").replace(illumination=Illumination.NIGHT)
        result = mr_by_subset([[_det(A, 1.0)], []], [day, night], eval_filter=ALL_OBJECTS)
        assert result == {"all": 0.0, "day": 0.0, "night": None}


class TestAveragePrecision:
    def test_matches_hand_computed_value(self):
        detections, ground_truth = _example()
        result = mean_average_precision(detections, ground_truth)
        assert result.per_class == {"pedestrian": pytest.approx(0.5)}

    def test_perfect_detector(self):
        ground_truth = [[_gt(A), _gt(B, label="cyclist")]]
        detections = [[_det(A, 0.9), _det(B, 0.8, label="cyclist")]]
        result = mean_average_precision(detections, ground_truth)
        assert result.map == 1.0
        assert set(result.per_class) == {"pedestrian", "cyclist"}

    def test_wrong_class_is_a_miss(self):
        result = mean_average_precision([[_det(A, 0.9, label="cyclist")]], [[_gt(A)]])
        assert result.per_class["pedestrian"] == 0.0

    def test_no_ground_truth(self):
        assert mean_average_precision([[]], [[]]).map == 0.0


class TestDegradation:
    def test_miss_rate_example(self):
        assert degradation_rate(15.2, 25.1, MetricKind.MR) == pytest.approx(0.651, abs=1e-3)

    def test_map_sign(self):
        assert degradation_rate(0.8, 0.4, MetricKind.MAP) == pytest.approx(0.5)
        assert degradation_rate(0.8, 0.9, MetricKind.MAP) < 0

    def test_zero_origin(self):
        with pytest.raises(MetricError):
            degradation_rate(0.0, 0.3, MetricKind.MR)

    def test_metric_kind(self):
        assert metric_kind(Metric.MR_SENSED) is MetricKind.MR
        assert metric_kind(Metric.MAP3D) is MetricKind.MAP


class TestShiftProtocols:
    def test_grid(self):
        shifts = grid_shifts(6)
        assert len(shifts) == 169
        assert (0, 0) in shifts and (-6, 6) in shifts

    def test_sweep_calls_every_shift(self):
        calls = []

        def evaluator(shift):
            calls.append(shift)
            return 0.1

        result = robustness_sweep(evaluator, grid_shifts(1))
        assert len(result) == 9 == len(calls)

    def test_weak_aligned_bound(self):
        def evaluator(shift):
            dx = shift[0]
            return 0.1 + (0.02 * dx if dx >= 0 else -0.04 * dx)

        assert weak_aligned_bound(evaluator, (1, 0), max_px=12) == (3, 2)
        assert weak_aligned_bound(evaluator, (1, 0), max_px=2) == (None, 2)

    @pytest.mark.parametrize("bound,expected", [(12, [2, 5, 7, 10, 12]), (3, [1, 1, 2, 2, 3]), (5, [1, 2, 3, 4, 5])])
    def test_spaced_magnitudes(self, bound, expected):
        assert spaced_magnitudes(bound) == expected

    def test_directional_shifts(self):
        shifts = directional_shifts(45, (3, None), max_px=12)
        assert shifts[:5] == [(1, 1), (1, 1), (2, 2), (2, 2), (3, 3)]
        assert shifts[5:] == [(-2, -2), (-5, -5), (-7, -7), (-10, -10), (-12, -12)]

    def test_unknown_direction(self):
        with pytest.raises(ConfigurationError):
            directional_shifts(30, (1, 1), max_px=12)

    def test_directional_stats(self):
        def evaluator(shift):
            return 0.1 + 0.01 * abs(shift[1])

        stats = directional_stats(evaluator, 90, (5, 5), max_px=12)
        values = [0.1 + 0.01 * k for k in [1, 2, 3, 4, 5] * 2]
        assert stats.origin == pytest.approx(0.1)
        assert stats.mean == pytest.approx(np.mean(values))
        assert stats.std == pytest.approx(np.std(values))
        assert stats.shifts[0] == (0, 1)


class TestDetectorEvaluator:
    def test_caches_per_shift(self, model, scenes):
        model.mark_trained()
        evaluator = DetectorEvaluator(model, scenes, Metric.MAP2D, ALL_OBJECTS)
        first = evaluator((0, 0))
        assert evaluator((0, 0)) == first
        assert list(evaluator._cache) == [(0, 0)]
        assert 0.0 <= first <= 1.0

    def test_map3d_needs_a_3d_head(self, model, scenes):
        with pytest.raises(ConfigurationError):
            DetectorEvaluator(model, scenes, Metric.MAP3D)

    def test_map3d_needs_depth(self, scenes):
        detections = [[] for _ in scenes]
        with pytest.raises(ConfigurationError):
            score_detections(detections, scenes, Metric.MAP3D)

    def test_perfect_detections_score_perfectly(self, scenes):
        detections = [
            [DetectionResult(box=o.ref_box, class_label=o.class_label, confidence=1.0) for o in s.objects if o.ref_box]
            for s in scenes
        ]
        assert score_detections(detections, scenes, Metric.MR, ALL_OBJECTS) == 0.0
        assert score_detections(detections, scenes, Metric.MAP2D) == 1.0

    def test_sensed_miss_rate_uses_sensed_boxes(self, scenes):
        detections = [
            [
                DetectionResult(box=o.sensed_box, class_label=o.class_label, confidence=1.0)
                for o in s.objects
                if o.sensed_box
            ]
            for s in scenes
        ]
        assert modality_mr(
            [[_det(d.box, d.confidence) for d in dets] for dets in detections], scenes, Modality.SENSED, ALL_OBJECTS
        ).mr == 0.0


class TestModelDiagnostics:
    def test_untrained_shift_error_is_the_true_displacement(self, model, scenes):
        result = shift_prediction_error(model, scenes)
        pairs = [o for s in scenes for o in s.objects if o.is_paired]
        true = [math.hypot(o.sensed_box.x - o.ref_box.x, o.sensed_box.y - o.ref_box.y) for o in pairs]
        assert result.n_objects == len(pairs)
        assert result.mae_px == pytest.approx(float(np.mean(true)), rel=1e-5)

    def test_shift_error_without_pairs(self, model, scenes):
        result = shift_prediction_error(model, [s.replace(objects=[]) for s in scenes])
        assert result.mae_px is None and result.n_objects == 0

    def test_proposal_recall(self, model, scenes):
        assert 0.0 <= proposal_recall(model, scenes) <= 1.0
        with pytest.raises(MetricError):
            proposal_recall(model, [s.replace(objects=[]) for s in scenes])


def _random_images(seed: int, n_images: int = 5, max_detections: int = 10):
    rng = np.random.default_rng(seed)
    detections, ground_truth = [], []
    budget = max_detections
    for _ in range(n_images):
        gts, dets = [], []
        for _ in range(rng.integers(0, 4)):
            g = box(*rng.uniform((20, 20, 10, 20), (80, 80, 20, 40)))
            gts.append(GroundTruth(g, "pedestrian", ignore=bool(rng.random() < 0.2)))
            for _ in range(rng.integers(0, 3)):
                moved = g.translate(rng.uniform(-4, 4), rng.uniform(-4, 4))
                dets.append(ScoredDetection(moved, round(rng.random(), 1), "pedestrian"))
        for _ in range(rng.integers(0, 3)):
            stray = box(*rng.uniform((0, 0, 8, 16), (100, 100, 20, 40)))
            dets.append(ScoredDetection(stray, round(rng.random(), 1), "pedestrian"))
        dets = dets[:budget]
        budget -= len(dets)
        detections.append(dets)
        ground_truth.append(gts)
    return detections, ground_truth


def _counts_at(threshold, detections, ground_truth):
    tp = fp = 0
    for dets, gts in zip(detections, ground_truth):
        kept = [d for d in dets if d.score >= threshold]
        for status in greedy_match(kept, gts, 0.5):
            tp += status is MatchStatus.TRUE_POSITIVE
            fp += status is MatchStatus.FALSE_POSITIVE
    return tp, fp


def _operating_points(detections, ground_truth):
    """(tp, fp) with every distinct score used as the threshold, plus the empty detector."""
    scores = sorted({d.score for dets in detections for d in dets}, reverse=True)
    return [(0, 0)] + [_counts_at(s, detections, ground_truth) for s in scores]


class TestAgainstThresholdEnumeration:
    @pytest.mark.parametrize("seed", range(16))
    def test_miss_rate(self, seed):
        detections, ground_truth = _random_images(seed)
        n_gt = sum(not g.ignore for gts in ground_truth for g in gts)
        if n_gt == 0:
            pytest.skip("no counted ground truth drawn")
        points = [
            (fp / len(ground_truth), 1.0 - tp / n_gt)
            for tp, fp in _operating_points(detections, ground_truth)
        ]
        samples = [min(miss for fppi, miss in points if fppi <= ref) for ref in reference_fppi()]
        expected = 0.0
        if min(samples) > 0.0:
            expected = math.exp(sum(math.log(s) for s in samples) / len(samples))

        result = log_average_miss_rate(detections, ground_truth)

        assert result.samples == pytest.approx(samples)
        assert result.mr == pytest.approx(expected)

    @pytest.mark.parametrize("seed", range(16))
    def test_average_precision(self, seed):
        detections, ground_truth = _random_images(seed)
        n_gt = sum(not g.ignore for gts in ground_truth for g in gts)
        if n_gt == 0:
            pytest.skip("no counted ground truth drawn")
        points = [
            (tp / n_gt, tp / (tp + fp))
            for tp, fp in _operating_points(detections, ground_truth)[1:]
            if tp + fp
        ]
        expected, previous = 0.0, 0.0
        for recall in sorted({r for r, _ in points}):
            if recall > previous:
                expected += (recall - previous) * max(p for r, p in points if r >= recall)
                previous = recall

        assert average_precision(detections, ground_truth, 0.5, iou) == pytest.approx(expected)
