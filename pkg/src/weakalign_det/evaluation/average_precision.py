"""Per-class average precision with all-point interpolation, for 2D and 3D boxes."""
from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict

from weakalign_det.data.schemas import Modality, ScenePair
from weakalign_det.evaluation.matching import (
    ALL_OBJECTS,
    EvalFilter,
    GroundTruth,
    MatchStatus,
    ScoredDetection,
    descending_order,
    greedy_match,
    image_ground_truth,
    tie_group_ends,
)
from weakalign_det.geometry.box3d import Box3D
from weakalign_det.geometry.boxes import iou
from weakalign_det.geometry.iou3d import iou_3d

logger = logging.getLogger(__name__)

IOU_THRESH_2D = 0.5
IOU_THRESH_3D = 0.25


class BoxDims(str, Enum):
    D2 = "2d"
    D3 = "3d"


class APResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    map: float
    per_class: dict[str, float]


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the monotone precision envelope."""
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def average_precision(
    detections: Sequence[Sequence[ScoredDetection[Any]]],
    ground_truth: Sequence[Sequence[GroundTruth[Any]]],
    iou_thresh: float,
    overlap: Callable[[Any, Any], float],
) -> float | None:
    """AP of one class; None when there is no counted ground truth."""
    n_gt = sum(1 for image in ground_truth for gt in image if not gt.ignore)
    if n_gt == 0:
        return None
    scores: list[float] = []
    hits: list[int] = []
    for dets, gts in zip(detections, ground_truth, strict=True):
        for det, status in zip(dets, greedy_match(dets, gts, iou_thresh, overlap), strict=True):
            if status is MatchStatus.IGNORED:
                continue
            scores.append(det.score)
            hits.append(int(status is MatchStatus.TRUE_POSITIVE))
    if not scores:
        return 0.0
    order = descending_order(scores)
    sorted_hits = np.asarray(hits, dtype=np.int64)[order]
    tp = np.cumsum(sorted_hits)
    ends = tie_group_ends(np.asarray(scores, dtype=np.float64)[order])
    precision = tp[ends] / (ends + 1)
    recall = tp[ends] / n_gt
    return interpolated_ap(precision, recall)


def mean_average_precision(
    detections: Sequence[Sequence[ScoredDetection[Any]]],
    ground_truth: Sequence[Sequence[GroundTruth[Any]]],
    iou_thresh: float | None = None,
    dims: BoxDims = BoxDims.D2,
) -> APResult:
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    dims = BoxDims(dims)
    overlap = iou if dims is BoxDims.D2 else iou_3d
    if iou_thresh is None:
        iou_thresh = IOU_THRESH_2D if dims is BoxDims.D2 else IOU_THRESH_3D

    classes = sorted({gt.class_label for image in ground_truth for gt in image})
    per_class: dict[str, float] = {}
    for label in classes:
        ap = average_precision(
            [[d for d in dets if d.class_label == label] for dets in detections],
            [[g for g in gts if g.class_label == label] for gts in ground_truth],
            iou_thresh,
            overlap,
        )
        if ap is not None:
            per_class[label] = ap
    if not per_class:
        logger.warning("No counted ground truth; mAP reported as 0")
        return APResult(map=0.0, per_class={})
    return APResult(map=float(np.mean(list(per_class.values()))), per_class=per_class)


def ground_truth_2d(
    scenes: Sequence[ScenePair], eval_filter: EvalFilter = ALL_OBJECTS
) -> list[list[GroundTruth[Any]]]:
    return [image_ground_truth(s.objects, Modality.REF, eval_filter) for s in scenes]  # type: ignore[misc]


def ground_truth_3d(scenes: Sequence[ScenePair]) -> list[list[GroundTruth[Box3D]]]:
    return [
        [GroundTruth(o.box3d, o.class_label) for o in s.objects if o.box3d is not None] for s in scenes
    ]
