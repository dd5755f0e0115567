"""
Shift robustness protocols.

Everything here is driven by a shift evaluator: a callable mapping a global
sensed-side shift ``(dx, dy)`` in pixels to a metric value.
:class:`DetectorEvaluator` is the one backed by a trained model and a dataset.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from enum import Enum

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torchvision.ops import box_iou

from weakalign_det.core.errors import ConfigurationError, MetricError
from weakalign_det.data.dataset import scene_images
from weakalign_det.data.schemas import Modality, ScenePair
from weakalign_det.data.shifting import shift_image
from weakalign_det.detector.inference import DetectionResult, detect_batch
from weakalign_det.detector.model import TwoStreamDetector
from weakalign_det.evaluation.average_precision import (
    BoxDims,
    ground_truth_2d,
    ground_truth_3d,
    mean_average_precision,
)
from weakalign_det.evaluation.matching import EvalFilter, ScoredDetection
from weakalign_det.evaluation.miss_rate import modality_mr
from weakalign_det.geometry.boxes import boxes_to_tensor, cxcywh_to_xyxy

logger = logging.getLogger(__name__)

Shift = tuple[int, int]
ShiftEvaluator = Callable[[Shift], float]

WEAK_ALIGN_DEGRADATION = 0.5
SHIFTS_PER_SIDE = 5
EVAL_BATCH = 32

# integer step vector per direction angle (degrees)
DIRECTIONS: dict[int, Shift] = {0: (1, 0), 45: (1, 1), 90: (0, 1), 135: (-1, 1)}


class Metric(str, Enum):
    MR = "mr"
    MR_REF = "mr-ref"
    MR_SENSED = "mr-sensed"
    MAP2D = "map2d"
    MAP3D = "map3d"

    @property
    def lower_is_better(self) -> bool:
        return self in (Metric.MR, Metric.MR_REF, Metric.MR_SENSED)


class MetricKind(str, Enum):
    MR = "mr"
    MAP = "map"


def metric_kind(metric: Metric) -> MetricKind:
    return MetricKind.MR if metric.lower_is_better else MetricKind.MAP


def degradation_rate(metric_original: float, metric_degraded: float, metric_kind: MetricKind) -> float:
    """Relative loss of performance; positive iff the degraded metric is worse."""
    if metric_original <= 0:
        raise MetricError(f"degradation rate is undefined for original metric {metric_original}")
    if MetricKind(metric_kind) is MetricKind.MR:
        return (metric_degraded - metric_original) / metric_original
    return (metric_original - metric_degraded) / metric_original


def grid_shifts(radius: int = 6) -> list[Shift]:
    return [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]


def scored(detections: Sequence[DetectionResult], dims: BoxDims = BoxDims.D2) -> list[ScoredDetection]:
    if dims is BoxDims.D3:
        return [
            ScoredDetection(d.box3d, d.confidence, d.class_label)
            for d in detections
            if d.box3d is not None
        ]
    return [ScoredDetection(d.box, d.confidence, d.class_label) for d in detections]


def score_detections(
    detections: Sequence[Sequence[DetectionResult]],
    scenes: Sequence[ScenePair],
    metric: Metric,
    eval_filter: EvalFilter | None = None,
) -> float:
    eval_filter = eval_filter or EvalFilter()
    if metric in (Metric.MR, Metric.MR_REF):
        return modality_mr([scored(d) for d in detections], scenes, Modality.REF, eval_filter).mr
    if metric is Metric.MR_SENSED:
        return modality_mr([scored(d) for d in detections], scenes, Modality.SENSED, eval_filter).mr
    if metric is Metric.MAP2D:
        return mean_average_precision([scored(d) for d in detections], ground_truth_2d(scenes)).map
    if not all(s.is_rgbd for s in scenes):
        raise ConfigurationError("map3d needs an RGB-D dataset")
    return mean_average_precision(
        [scored(d, BoxDims.D3) for d in detections], ground_truth_3d(scenes), dims=BoxDims.D3
    ).map


class DetectorEvaluator:
    """Metric of ``model`` on ``scenes`` with the sensed side moved by a global shift; cached per shift."""

    def __init__(
        self,
        model: TwoStreamDetector,
        scenes: Sequence[ScenePair],
        metric: Metric = Metric.MR,
        eval_filter: EvalFilter | None = None,
        score_threshold: float = 0.0,
    ):
        if metric is Metric.MAP3D and not model.config.use_3d:
            raise ConfigurationError("map3d needs a model trained with the 3D head")
        self.model = model
        self.scenes = list(scenes)
        self.metric = metric
        self.eval_filter = eval_filter or EvalFilter()
        self.score_threshold = score_threshold
        self._cache: dict[Shift, float] = {}

    def detections(self, shift: Shift) -> tuple[list[ScenePair], list[list[DetectionResult]]]:
        shifted = [shift_image(s, shift) for s in self.scenes]
        results: list[list[DetectionResult]] = []
        for start in range(0, len(shifted), EVAL_BATCH):
            chunk = shifted[start : start + EVAL_BATCH]
            results += detect_batch(chunk, self.model, self.score_threshold)
        return shifted, results

    def __call__(self, shift: Shift) -> float:
        shift = (int(shift[0]), int(shift[1]))
        if shift not in self._cache:
            scenes, results = self.detections(shift)
            self._cache[shift] = score_detections(results, scenes, self.metric, self.eval_filter)
            logger.debug("%s at shift %s = %.4f", self.metric.value, shift, self._cache[shift])
        return self._cache[shift]


def robustness_sweep(evaluator: ShiftEvaluator, shift_set: Iterable[Shift]) -> dict[Shift, float]:
    return {tuple(s): evaluator(tuple(s)) for s in shift_set}  # type: ignore[misc]


def weak_aligned_bound(
    evaluator: ShiftEvaluator,
    direction: Shift,
    max_px: int,
    kind: MetricKind = MetricKind.MR,
) -> tuple[int | None, int | None]:
    """Smallest k in 1..max_px with R_d(+-k * direction) >= 0.5 on each side; None means > max_px."""
    origin = evaluator((0, 0))
    bounds: list[int | None] = []
    for sign in (1, -1):
        found = None
        for k in range(1, max_px + 1):
            shift = (sign * k * direction[0], sign * k * direction[1])
            if degradation_rate(origin, evaluator(shift), kind) >= WEAK_ALIGN_DEGRADATION:
                found = k
                break
        bounds.append(found)
    return bounds[0], bounds[1]


def spaced_magnitudes(bound: int, n: int = SHIFTS_PER_SIDE) -> list[int]:
    """``n`` magnitudes equally spaced in (0, bound], rounded half up; duplicates kept."""
    return [int(math.floor(i * bound / n + 0.5)) for i in range(1, n + 1)]


class DirectionalStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    angle: int
    origin: float
    mean: float
    std: float
    bounds: tuple[int | None, int | None]
    shifts: list[Shift]
    values: list[float]


def directional_shifts(angle: int, bounds: tuple[int | None, int | None], max_px: int) -> list[Shift]:
    if angle not in DIRECTIONS:
        raise ConfigurationError(f"direction must be one of {sorted(DIRECTIONS)}, got {angle}")
    step = DIRECTIONS[angle]
    shifts: list[Shift] = []
    for sign, bound in zip((1, -1), bounds, strict=True):
        b = max_px if bound is None else bound
        shifts += [(sign * k * step[0], sign * k * step[1]) for k in spaced_magnitudes(b)]
    return shifts


def directional_stats(
    evaluator: ShiftEvaluator,
    angle: int,
    bounds: tuple[int | None, int | None],
    max_px: int,
) -> DirectionalStats:
    """Mean and population standard deviation of the metric over the ten directional shifts."""
    shifts = directional_shifts(angle, bounds, max_px)
    values = [evaluator(s) for s in shifts]
    return DirectionalStats(
        angle=angle,
        origin=evaluator((0, 0)),
        mean=float(np.mean(values)),
        std=float(np.std(values)),
        bounds=bounds,
        shifts=shifts,
        values=values,
    )


class ShiftErrorResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    mae_px: float | None
    n_objects: int


def shift_prediction_error(model: TwoStreamDetector, scenes: Sequence[ScenePair]) -> ShiftErrorResult:
    """Mean pixel distance between the shift predicted on each paired ground-truth box and the true one."""
    model.eval()
    errors: list[float] = []
    for start in range(0, len(scenes), EVAL_BATCH):
        chunk = scenes[start : start + EVAL_BATCH]
        pairs = [
            (i, o.ref_box, o.sensed_box) for i, s in enumerate(chunk) for o in s.objects if o.is_paired
        ]
        if not pairs:
            continue
        images = [scene_images(s) for s in chunk]
        with torch.no_grad():
            f_ref, f_sensed = model.features(
                torch.stack([r for r, _ in images]), torch.stack([x for _, x in images])
            )
            rois = boxes_to_tensor([ref for _, ref, _ in pairs])
            index = torch.tensor([i for i, _, _ in pairs], dtype=torch.long)
            t = model.rfa(f_ref, f_sensed, rois, index).shift
        predicted = t * rois[:, 2:]
        true = torch.tensor([(s.x - r.x, s.y - r.y) for _, r, s in pairs], dtype=predicted.dtype)
        errors += torch.linalg.vector_norm(predicted - true, dim=1).tolist()
    return ShiftErrorResult(mae_px=float(np.mean(errors)) if errors else None, n_objects=len(errors))


def proposal_recall(
    model: TwoStreamDetector,
    scenes: Sequence[ScenePair],
    iou_thresh: float = 0.5,
    top_k: int = 100,
) -> float:
    """Fraction of reference ground-truth boxes covered by one of the top-k proposals."""
    model.eval()
    covered = total = 0
    for start in range(0, len(scenes), EVAL_BATCH):
        chunk = scenes[start : start + EVAL_BATCH]
        images = [scene_images(s) for s in chunk]
        with torch.no_grad():
            f_ref, f_sensed = model.features(
                torch.stack([r for r, _ in images]), torch.stack([x for _, x in images])
            )
            logits, deltas = model.rpn(f_ref, f_sensed)
            proposals = model.rpn.propose(logits, deltas, model.anchors, model.config.image_size, top_k)
        for scene, (boxes, _) in zip(chunk, proposals, strict=True):
            gt = boxes_to_tensor([o.ref_box for o in scene.objects if o.ref_box is not None])
            total += gt.shape[0]
            if gt.shape[0] and boxes.shape[0]:
                best = box_iou(cxcywh_to_xyxy(gt), cxcywh_to_xyxy(boxes)).max(dim=1).values
                covered += int((best >= iou_thresh).sum())
    if total == 0:
        raise MetricError("proposal recall is undefined without ground truth")
    return covered / total
