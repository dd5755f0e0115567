import numpy as np
import pytest
import torch

from weakalign_det.alignment.jitter import (
    NEIGHBOUR_OFFSETS,
    JitterConfig,
    asc_pair,
    roi_jitter,
    sample_jitter,
    sample_neighbour_offsets,
)
from weakalign_det.alignment.losses import (
    LossConfig,
    RoIBatchTargets,
    ShiftPrediction,
    asc_loss,
    masked_shift_loss,
    multi_task_loss,
    shift_loss,
)
from weakalign_det.alignment.rfa import (
    Combiner,
    RegionShiftHead,
    align_and_repool,
    predict_region_shift,
    to_shift_targets,
)
from weakalign_det.alignment.sampling import (
    IGNORE,
    assign_labels,
    assign_minibatch_labels,
    sample_minibatch,
)
from weakalign_det.core.errors import ConfigurationError, ShiftTargetError
from weakalign_det.data.schemas import PairedObject
from weakalign_det.detector.backbone import FeatureMap
from weakalign_det.detector.model import TwoStreamDetector
from weakalign_det.detector.roi_align import roi_align, single_batch_index
from weakalign_det.geometry.boxes import ShiftTarget, apply_shift_tensor
from weakalign_det.tests.conftest import assert_gradient_matches, box


class TestRegionShiftHead:
    def test_starts_at_zero_shift(self):
        head = RegionShiftHead(4, (7, 7))
        t = head(torch.randn(5, 4, 7, 7), torch.randn(5, 4, 7, 7))
        assert t.shape == (5, 2)
        assert torch.all(t == 0.0)

    def test_concat_doubles_input(self):
        head = RegionShiftHead(4, (7, 7), combiner=Combiner.CONCAT)
        assert head.fc1.in_features == 2 * 4 * 7 * 7
        assert head(torch.randn(2, 4, 7, 7), torch.randn(2, 4, 7, 7)).shape == (2, 2)

    def test_rejects_mismatched_features(self):
        head = RegionShiftHead(4, (7, 7))
        with pytest.raises(ConfigurationError):
            head(torch.randn(2, 4, 7, 7), torch.randn(2, 4, 5, 5))
        with pytest.raises(ConfigurationError):
            head(torch.randn(2, 3, 7, 7), torch.randn(2, 3, 7, 7))

    def test_single_region(self):
        head = RegionShiftHead(4, (7, 7))
        t = predict_region_shift(torch.randn(4, 7, 7), torch.randn(4, 7, 7), head)
        assert t.shape == (2,)
        assert to_shift_targets(t) == [ShiftTarget()]


def test_repool_at_zero_shift_matches_plain_pooling():
    f = FeatureMap(torch.randn(4, 16, 16), stride=4)
    roi = box(30, 28)
    expected = roi_align(f.batched(), torch.tensor([roi.as_tuple()]), single_batch_index(1), 4)[0]
    assert torch.allclose(align_and_repool(f, roi, ShiftTarget()), expected)


def test_repool_follows_the_shift():
    f = FeatureMap(torch.randn(4, 16, 16), stride=4)
    moved = align_and_repool(f, box(30, 28), ShiftTarget(t_x=0.5, t_y=-0.25))
    expected = align_and_repool(f, box(34, 24), ShiftTarget())
    assert torch.allclose(moved, expected)


class TestRegionFeatureAlignment:
    def _inputs(self, model, scenes):
        ref = torch.from_numpy(scenes[0].ref_image)[None, None]
        sensed = torch.from_numpy(scenes[0].sensed_image)[None, None]
        return model.features(ref, sensed)

    def test_disabled_passes_sensed_rois_through(self, model_config, scenes):
        model = TwoStreamDetector(model_config.model_copy(update={"use_rfa": False}))
        f_ref, f_sensed = self._inputs(model, scenes)
        rois = torch.tensor([[20.0, 20.0, 10.0, 20.0]])
        sensed_rois = torch.tensor([[23.0, 18.0, 10.0, 20.0]])
        out = model.rfa(f_ref, f_sensed, rois, single_batch_index(1), sensed_rois)
        assert torch.all(out.shift == 0.0)
        assert torch.equal(out.aligned_rois, sensed_rois)

    def test_shift_is_detached_before_repooling(self, model, scenes):
        torch.nn.init.normal_(model.rfa.head.fc2.weight, std=0.1)
        f_ref, f_sensed = self._inputs(model, scenes)
        rois = torch.tensor([[20.0, 20.0, 10.0, 20.0], [40.0, 36.0, 12.0, 24.0]])
        out = model.rfa(f_ref, f_sensed, rois, single_batch_index(2))
        out.rf_sensed.sum().backward()
        assert model.rfa.head.fc2.weight.grad is None
        assert torch.allclose(out.aligned_rois, apply_shift_tensor(rois, out.shift.detach()))


class TestJitter:
    def test_sigma_matches_configuration(self):
        g = torch.Generator().manual_seed(0)
        draws = sample_jitter(100_000, JitterConfig(), generator=g)
        std = draws.std(dim=0)
        assert torch.all((std - 0.05).abs() <= 0.05 * 0.02)
        assert torch.all(draws.mean(dim=0).abs() < 1e-3)

    def test_roi_jitter_moves_the_roi(self):
        rng = np.random.default_rng(0)
        moved, t_j = roi_jitter(box(30, 30), JitterConfig(sigma0=0.1, sigma1=0.1), rng)
        assert moved.x == pytest.approx(30 + t_j.t_x * 8)
        assert moved.y == pytest.approx(30 + t_j.t_y * 16)

    def test_jittered_target_absorbs_the_jitter(self):
        rois = torch.tensor([[20.0, 20.0, 10.0, 20.0], [50.0, 20.0, 8.0, 8.0]])
        gt_ref = torch.tensor([[21.0, 20.0, 10.0, 20.0]])
        gt_sensed = torch.tensor([[24.0, 18.0, 10.0, 20.0]])
        args = (gt_ref, torch.tensor([1]), gt_sensed, torch.tensor([True]))
        plain = assign_labels(rois, *args)
        t_j = sample_jitter(2, JitterConfig(), torch.Generator().manual_seed(1))
        jittered = assign_labels(rois, *args, sensed_rois=apply_shift_tensor(rois, t_j))
        assert torch.equal(plain.labels, jittered.labels)
        assert torch.allclose(jittered.shift_targets[0], plain.shift_targets[0] - t_j[0], atol=1e-6)

    def test_neighbour_offsets(self):
        offsets = sample_neighbour_offsets(1000, 4, torch.Generator().manual_seed(0))
        allowed = {(4 * dx, 4 * dy) for dx, dy in NEIGHBOUR_OFFSETS}
        seen = {(int(x), int(y)) for x, y in offsets.tolist()}
        assert seen == allowed

    def test_asc_pair_moves_one_stride(self):
        moved = asc_pair(box(30, 30), 4, np.random.default_rng(2))
        assert abs(moved.x - 30) + abs(moved.y - 30) == 4
        with pytest.raises(ValueError):
            asc_pair(box(30, 30), 0, np.random.default_rng(2))


class TestLabelAssignment:
    def _objects(self):
        return [
            PairedObject(pair_id=7, class_label="pedestrian", ref_box=box(20, 20), sensed_box=box(23, 19)),
            PairedObject(pair_id=8, class_label="pedestrian", ref_box=box(45, 40), unpaired=True),
        ]

    def test_targets_per_roi(self):
        labels = assign_minibatch_labels(
            [box(20, 20), box(45, 40), box(5, 50), box(24, 20)], self._objects(), fg_thr=0.5, bg_thr=0.2
        )
        assert labels[0].label == 1 and labels[0].pair_id == 7
        assert labels[0].shift_target.t_x == pytest.approx(3 / 8)
        assert labels[0].shift_target.t_y == pytest.approx(-1 / 16)
        assert labels[0].reg_target == pytest.approx((0.0, 0.0, 0.0, 0.0))
        # positive without a sensed box carries no shift target
        assert labels[1].label == 1 and labels[1].shift_target is None
        assert labels[2].label == 0
        # IoU 1/3 falls between the thresholds
        assert labels[3].label == IGNORE

    def test_shift_target_uses_roi_scale(self):
        labels = assign_minibatch_labels([box(21, 20, 10, 20)], self._objects()[:1], fg_thr=0.5, bg_thr=0.3)
        # (roi centre + pair displacement - roi centre) / roi size
        assert labels[0].shift_target.t_x == pytest.approx(3 / 10)
        assert labels[0].shift_target.t_y == pytest.approx(-1 / 20)

    def test_rejects_inverted_thresholds(self):
        with pytest.raises(ValueError):
            assign_minibatch_labels([box(20, 20)], self._objects(), fg_thr=0.3, bg_thr=0.5)

    def test_minibatch_respects_positive_fraction(self):
        rois = torch.tensor([[20.0, 20.0, 8.0, 16.0]] * 10 + [[50.0, 50.0, 8.0, 8.0]] * 30)
        assignment = assign_labels(
            rois,
            torch.tensor([[20.0, 20.0, 8.0, 16.0]]),
            torch.tensor([1]),
            torch.tensor([[22.0, 20.0, 8.0, 16.0]]),
            torch.tensor([True]),
        )
        picked = sample_minibatch(assignment, rois_per_image=16, positive_fraction=0.25)
        chosen = assignment.select(picked)
        assert picked.numel() == 16
        assert int((chosen.labels > 0).sum()) == 4
        assert bool(chosen.has_shift[chosen.labels > 0].all())


class TestShiftLosses:
    def test_mean_over_masked_rois(self):
        pred = torch.tensor([[1.0, 0.0], [0.0, 0.0], [5.0, 5.0]])
        target = torch.zeros(3, 2)
        assert float(masked_shift_loss(pred, target, torch.tensor([True, True, False]))) == pytest.approx(0.25)
        assert float(masked_shift_loss(pred, target, torch.tensor([False, False, False]))) == 0.0

    def test_unmasked_rois_get_no_gradient(self):
        pred = torch.randn(3, 2, requires_grad=True)
        masked_shift_loss(pred, torch.zeros(3, 2), torch.tensor([True, False, True])).backward()
        assert torch.all(pred.grad[1] == 0.0)
        assert torch.any(pred.grad[0] != 0.0)

    def test_list_forms(self):
        predictions = [
            ShiftPrediction(
                roi_index=0,
                predicted=ShiftTarget(t_x=1.0),
                target=ShiftTarget(),
                neighbor_predicted=ShiftTarget(t_y=2.0),
            ),
            ShiftPrediction(roi_index=1, predicted=ShiftTarget(t_x=9.0)),
        ]
        assert shift_loss(predictions, [1, 0]) == pytest.approx(0.5)
        assert asc_loss(predictions, [1, 0]) == pytest.approx(1.5)

    def test_positive_without_target(self):
        with pytest.raises(ShiftTargetError):
            shift_loss([ShiftPrediction(roi_index=0, predicted=ShiftTarget())], [1])

    def test_total_weighting(self):
        logits = torch.tensor([[0.0, 2.0], [1.0, 0.0]])
        targets = RoIBatchTargets(
            labels=torch.tensor([1, 0]),
            reg_targets=torch.zeros(2, 4),
            shift_targets=torch.zeros(2, 2),
            shift_mask=torch.tensor([True, False]),
        )
        deltas = torch.tensor([[0.5, 0.0, 0.0, 0.0], [3.0, 3.0, 3.0, 3.0]])
        shift_pred = torch.tensor([[1.0, 0.0], [4.0, 4.0]])
        asc_pred = torch.tensor([[0.0, 1.0], [4.0, 4.0]])
        out = multi_task_loss(
            logits, deltas, shift_pred, asc_pred, targets, LossConfig(), {"rpn": torch.tensor(0.125)}
        )
        values = out.as_floats()
        assert values["shift"] == pytest.approx(0.5)
        assert values["asc"] == pytest.approx(0.5)
        assert values["reg"] == pytest.approx(0.125 / 2)
        expected = values["cls"] + 0.75 * 0.5 + 0.25 * 0.5 + values["reg"] + 0.125
        assert values["total"] == pytest.approx(expected)

    def test_missing_shift_predictions_contribute_zero(self):
        targets = RoIBatchTargets(
            labels=torch.tensor([0]),
            reg_targets=torch.zeros(1, 4),
            shift_targets=torch.zeros(1, 2),
            shift_mask=torch.tensor([False]),
        )
        out = multi_task_loss(torch.zeros(1, 2), torch.zeros(1, 4), None, None, targets, LossConfig())
        assert out.as_floats()["shift"] == 0.0
        assert out.as_floats()["total"] == pytest.approx(float(torch.log(torch.tensor(2.0))))


class TestLossGradients:
    def _targets(self):
        return RoIBatchTargets(
            labels=torch.tensor([1, 0, 2, 1]),
            reg_targets=torch.randn(4, 4, dtype=torch.float64),
            shift_targets=torch.randn(4, 2, dtype=torch.float64) * 0.5,
            shift_mask=torch.tensor([True, False, True, False]),
        )

    def test_masked_shift_loss(self):
        target = torch.randn(5, 2, dtype=torch.float64)
        mask = torch.tensor([True, False, True, True, False])
        pred = target + 2.0 * torch.randn(5, 2, dtype=torch.float64)
        assert_gradient_matches(lambda p: masked_shift_loss(p, target, mask), pred)

    def test_total_loss_in_every_input(self):
        targets, cfg = self._targets(), LossConfig()
        logits = torch.randn(4, 3, dtype=torch.float64)
        deltas = torch.randn(4, 4, dtype=torch.float64)
        shift = torch.randn(4, 2, dtype=torch.float64)
        asc = torch.randn(4, 2, dtype=torch.float64)

        def total(**inputs):
            args = {"logits": logits, "deltas": deltas, "shift": shift, "asc": asc, **inputs}
            out = multi_task_loss(
                args["logits"], args["deltas"], args["shift"], args["asc"], targets, cfg
            )
            return out.total

        assert_gradient_matches(lambda x: total(logits=x), logits)
        assert_gradient_matches(lambda x: total(deltas=x), deltas)
        assert_gradient_matches(lambda x: total(shift=x), shift)
        assert_gradient_matches(lambda x: total(asc=x), asc)
