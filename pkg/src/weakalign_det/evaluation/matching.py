"""Ground-truth selection and greedy detection-to-GT matching shared by all metrics."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import IntEnum
from typing import Generic, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from weakalign_det.data.schemas import Modality, Occlusion, PairedObject
from weakalign_det.geometry.boxes import Box2D, iou

DEFAULT_IOU_THRESH = 0.5

B = TypeVar("B")


class EvalFilter(BaseModel):
    """Which ground truth counts; everything else becomes an ignore region."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    min_height: float = Field(default=55.0, ge=0.0)
    max_occlusion: Occlusion = Occlusion.PARTIAL
    ignore_truncated: bool = False
    iou_thresh: float = Field(default=DEFAULT_IOU_THRESH, gt=0.0, le=1.0)

    def keeps(self, obj: PairedObject, box: Box2D, modality: Modality) -> bool:
        if box.h < self.min_height:
            return False
        if obj.occlusion.rank > self.max_occlusion.rank:
            return False
        return not (self.ignore_truncated and obj.truncated(modality))


ALL_OBJECTS = EvalFilter(min_height=0.0, max_occlusion=Occlusion.HEAVY)


@dataclass(frozen=True)
class GroundTruth(Generic[B]):
    box: B
    class_label: str
    ignore: bool = False


class MatchStatus(IntEnum):
    IGNORED = -1
    FALSE_POSITIVE = 0
    TRUE_POSITIVE = 1


@dataclass(frozen=True)
class ScoredDetection(Generic[B]):
    box: B
    score: float
    class_label: str = ""


def image_ground_truth(
    objects: Sequence[PairedObject],
    modality: Modality,
    eval_filter: EvalFilter,
) -> list[GroundTruth[Box2D]]:
    """Boxes of ``modality``; objects missing there contribute their other box as an ignore region."""
    other = Modality.SENSED if modality is Modality.REF else Modality.REF
    out: list[GroundTruth[Box2D]] = []
    for obj in objects:
        box = obj.box(modality)
        if box is None:
            fallback = obj.box(other)
            if fallback is not None:
                out.append(GroundTruth(fallback, obj.class_label, ignore=True))
            continue
        out.append(GroundTruth(box, obj.class_label, ignore=not eval_filter.keeps(obj, box, modality)))
    return out


def descending_order(scores: Sequence[float]) -> np.ndarray:
    """Indices sorting ``scores`` high to low; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def greedy_match(
    detections: Sequence[ScoredDetection[B]],
    ground_truth: Sequence[GroundTruth[B]],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    overlap: Callable[[B, B], float] = iou,  # type: ignore[assignment]
) -> list[MatchStatus]:
    """Status per detection (input order), matching in descending score order.

    A detection takes the best-overlapping unmatched counted GT with overlap
    >= ``iou_thresh``. Failing that, overlapping an ignore region (any number of
    times) makes it neither a hit nor a false positive.
    """
    status = [MatchStatus.FALSE_POSITIVE] * len(detections)
    taken = [False] * len(ground_truth)
    for d in descending_order([det.score for det in detections]):
        det = detections[int(d)]
        best, best_iou = -1, iou_thresh
        hits_ignored = False
        for g, gt in enumerate(ground_truth):
            o = overlap(det.box, gt.box)
            if o < iou_thresh:
                continue
            if gt.ignore:
                hits_ignored = True
            elif not taken[g] and o >= best_iou:
                if best < 0 or o > best_iou:
                    best, best_iou = g, o
        if best >= 0:
            taken[best] = True
            status[int(d)] = MatchStatus.TRUE_POSITIVE
        elif hits_ignored:
            status[int(d)] = MatchStatus.IGNORED
    return status


def tie_group_ends(sorted_scores: np.ndarray) -> np.ndarray:
    """Last index of each run of equal scores in a descending array."""
    if sorted_scores.size == 0:
        return np.zeros(0, dtype=int)
    change = np.nonzero(sorted_scores[1:] != sorted_scores[:-1])[0]
    return np.concatenate((change, [sorted_scores.size - 1]))
