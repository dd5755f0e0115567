"""Log-average miss rate over false positives per image."""
from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from weakalign_det.core.errors import MetricError
from weakalign_det.data.schemas import Illumination, Modality, ScenePair
from weakalign_det.evaluation.matching import (
    EvalFilter,
    GroundTruth,
    MatchStatus,
    ScoredDetection,
    descending_order,
    greedy_match,
    image_ground_truth,
    tie_group_ends,
)
from weakalign_det.geometry.boxes import Box2D

logger = logging.getLogger(__name__)

FPPI_RANGE = (1e-2, 1e0)
FPPI_SAMPLES = 9


def reference_fppi(n: int = FPPI_SAMPLES) -> np.ndarray:
    return np.logspace(np.log10(FPPI_RANGE[0]), np.log10(FPPI_RANGE[1]), n)


class MissRateResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    mr: float
    samples: list[float]  # miss rate at each reference FPPI
    fppi: list[float]  # operating points, starting from the empty detector
    miss_rate: list[float]
    n_images: int
    n_ground_truth: int


def miss_rate_curve(
    detections: Sequence[Sequence[ScoredDetection[Box2D]]],
    ground_truth: Sequence[Sequence[GroundTruth[Box2D]]],
    iou_thresh: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Operating points (fppi, miss rate) at every distinct confidence threshold."""
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    n_images = len(ground_truth)
    n_gt = sum(1 for image in ground_truth for gt in image if not gt.ignore)
    if n_images == 0 or n_gt == 0:
        raise MetricError("miss rate is undefined without ground truth")

    scores: list[float] = []
    hits: list[int] = []
    for dets, gts in zip(detections, ground_truth, strict=True):
        for det, status in zip(dets, greedy_match(dets, gts, iou_thresh), strict=True):
            if status is MatchStatus.IGNORED:
                continue
            scores.append(det.score)
            hits.append(int(status is MatchStatus.TRUE_POSITIVE))

    order = descending_order(scores)
    sorted_scores = np.asarray(scores, dtype=np.float64)[order]
    tp = np.cumsum(np.asarray(hits, dtype=np.int64)[order])
    fp = np.cumsum(1 - np.asarray(hits, dtype=np.int64)[order])
    ends = tie_group_ends(sorted_scores)
    fppi = np.concatenate(([0.0], fp[ends] / n_images))
    miss = np.concatenate(([1.0], 1.0 - tp[ends] / n_gt))
    return fppi, miss, n_gt


def sample_miss_rate(fppi: np.ndarray, miss: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Miss rate at each reference FPPI: the last operating point not exceeding it."""
    out = np.empty(len(refs))
    for i, r in enumerate(refs):
        j = np.nonzero(fppi <= r)[0]
        out[i] = miss[j[-1]]
    return out


def log_average(samples: np.ndarray) -> float:
    """Geometric mean; exactly 0 when any sample is 0."""
    if np.any(samples <= 0.0):
        return 0.0
    return float(np.exp(np.mean(np.log(samples))))


def log_average_miss_rate(
    detections: Sequence[Sequence[ScoredDetection[Box2D]]],
    ground_truth: Sequence[Sequence[GroundTruth[Box2D]]],
    iou_thresh: float = 0.5,
) -> MissRateResult:
    fppi, miss, n_gt = miss_rate_curve(detections, ground_truth, iou_thresh)
    samples = sample_miss_rate(fppi, miss, reference_fppi())
    return MissRateResult(
        mr=log_average(samples),
        samples=samples.tolist(),
        fppi=fppi.tolist(),
        miss_rate=miss.tolist(),
        n_images=len(ground_truth),
        n_ground_truth=n_gt,
    )


def modality_mr(
    detections: Sequence[Sequence[ScoredDetection[Box2D]]],
    scenes: Sequence[ScenePair],
    modality: Modality,
    eval_filter: EvalFilter | None = None,
) -> MissRateResult:
    """MR against the ``modality`` boxes of the paired annotations."""
    eval_filter = eval_filter or EvalFilter()
    ground_truth = [image_ground_truth(s.objects, modality, eval_filter) for s in scenes]
    return log_average_miss_rate(detections, ground_truth, eval_filter.iou_thresh)


def mr_by_subset(
    detections: Sequence[Sequence[ScoredDetection[Box2D]]],
    scenes: Sequence[ScenePair],
    modality: Modality = Modality.REF,
    eval_filter: EvalFilter | None = None,
) -> dict[str, float | None]:
    """MR over all scenes and over day and night scenes separately (None when a subset has no GT)."""
    out: dict[str, float | None] = {}
    subsets = {
        "all": list(range(len(scenes))),
        "day": [i for i, s in enumerate(scenes) if s.illumination is Illumination.DAY],
        "night": [i for i, s in enumerate(scenes) if s.illumination is Illumination.NIGHT],
    }
    for name, index in subsets.items():
        try:
            result = modality_mr(
                [detections[i] for i in index], [scenes[i] for i in index], modality, eval_filter
            )
            out[name] = result.mr
        except MetricError:
            logger.debug("No ground truth in the %s subset", name)
            out[name] = None
    return out
