"""
Minibatch label assignment for the RoI head.

Foreground and background are decided by the IoU of the reference RoI with
the reference ground truth only, so moving the sensed RoI never flips a label.
A positive RoI's shift target moves its sensed RoI by the matched pair's
pixel displacement, expressed in sensed-RoI width/height units.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import torch
from pydantic import BaseModel, ConfigDict
from torch import Tensor
from torchvision.ops import box_iou

from weakalign_det.data.schemas import PairedObject
from weakalign_det.geometry.box_coder import BBOX_REG_WEIGHTS, encode_deltas
from weakalign_det.geometry.boxes import Box2D, ShiftTarget, boxes_to_tensor, cxcywh_to_xyxy

DEFAULT_FG_THRESH = 0.5
DEFAULT_BG_THRESH = 0.5
DEFAULT_ROIS_PER_IMAGE = 64
DEFAULT_POSITIVE_FRACTION = 0.25

BACKGROUND = 0
IGNORE = -1


@dataclass
class LabelAssignment:
    labels: Tensor  # (K,) class index, 0 background, -1 ignored
    matched: Tensor  # (K,) index into the ground truth, -1 when unmatched
    reg_targets: Tensor  # (K, 4) box deltas toward the matched reference box
    shift_targets: Tensor  # (K, 2)
    has_shift: Tensor  # (K,) bool, positive and the matched pair has a sensed box

    def select(self, index: Tensor) -> LabelAssignment:
        return LabelAssignment(
            labels=self.labels[index],
            matched=self.matched[index],
            reg_targets=self.reg_targets[index],
            shift_targets=self.shift_targets[index],
            has_shift=self.has_shift[index],
        )


def _check_thresholds(fg_thr: float, bg_thr: float) -> None:
    if not (0.0 <= bg_thr <= fg_thr <= 1.0):
        raise ValueError(f"need 0 <= bg_thr <= fg_thr <= 1, got bg_thr={bg_thr}, fg_thr={fg_thr}")


def assign_labels(
    rois: Tensor,
    gt_ref: Tensor,
    gt_labels: Tensor,
    gt_sensed: Tensor,
    has_sensed: Tensor,
    fg_thr: float = DEFAULT_FG_THRESH,
    bg_thr: float = DEFAULT_BG_THRESH,
    sensed_rois: Tensor | None = None,
    reg_weights: Sequence[float] = BBOX_REG_WEIGHTS,
) -> LabelAssignment:
    """Tensor form: center-form ``rois`` (K, 4) against ``gt_ref`` (M, 4)."""
    _check_thresholds(fg_thr, bg_thr)
    k = rois.shape[0]
    sensed_rois = rois if sensed_rois is None else sensed_rois
    labels = torch.zeros(k, dtype=torch.long, device=rois.device)
    matched = torch.full((k,), -1, dtype=torch.long, device=rois.device)
    reg_targets = rois.new_zeros((k, 4))
    shift_targets = rois.new_zeros((k, 2))
    has_shift = torch.zeros(k, dtype=torch.bool, device=rois.device)
    if k == 0 or gt_ref.shape[0] == 0:
        return LabelAssignment(labels, matched, reg_targets, shift_targets, has_shift)

    ious = box_iou(cxcywh_to_xyxy(rois), cxcywh_to_xyxy(gt_ref.to(rois.dtype)))
    best_iou, best = ious.max(dim=1)
    positive = best_iou >= fg_thr
    ignored = (best_iou >= bg_thr) & ~positive

    labels[positive] = gt_labels[best[positive]]
    labels[ignored] = IGNORE
    matched[positive] = best[positive]

    pos = torch.where(positive)[0]
    if pos.numel() > 0:
        m = best[pos]
        ref_gt = gt_ref[m].to(rois.dtype)
        reg_targets[pos] = encode_deltas(ref_gt, rois[pos], reg_weights)
        displacement = gt_sensed[m, :2].to(rois.dtype) - ref_gt[:, :2]
        aligned_center = rois[pos, :2] + displacement
        shift_targets[pos] = (aligned_center - sensed_rois[pos, :2]) / sensed_rois[pos, 2:]
        has_shift[pos] = has_sensed[m]
        shift_targets[pos] = torch.where(
            has_shift[pos, None], shift_targets[pos], torch.zeros_like(shift_targets[pos])
        )
    return LabelAssignment(labels, matched, reg_targets, shift_targets, has_shift)


def sample_minibatch(
    assignment: LabelAssignment,
    rois_per_image: int = DEFAULT_ROIS_PER_IMAGE,
    positive_fraction: float = DEFAULT_POSITIVE_FRACTION,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Indices of at most ``rois_per_image`` RoIs with at most ``positive_fraction`` positives."""
    positive = torch.where(assignment.labels > 0)[0]
    negative = torch.where(assignment.labels == BACKGROUND)[0]
    num_pos = min(positive.numel(), int(rois_per_image * positive_fraction))
    num_neg = min(negative.numel(), rois_per_image - num_pos)
    pos = positive[torch.randperm(positive.numel(), generator=generator)[:num_pos]]
    neg = negative[torch.randperm(negative.numel(), generator=generator)[:num_neg]]
    return torch.cat((pos, neg))


class RoILabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: int  # p*
    pair_id: int | None = None
    reg_target: tuple[float, float, float, float] | None = None  # g*
    shift_target: ShiftTarget | None = None  # t*


def assign_minibatch_labels(
    proposals: Sequence[object],
    objects: Sequence[PairedObject],
    fg_thr: float = DEFAULT_FG_THRESH,
    bg_thr: float = DEFAULT_BG_THRESH,
    class_names: Sequence[str] | None = None,
    sensed_rois: Sequence[Box2D] | None = None,
) -> list[RoILabel]:
    """Per proposal (p*, g*, t*). Proposals may be ``Box2D`` or objects with a ``roi`` attribute."""
    _check_thresholds(fg_thr, bg_thr)
    rois = [p if isinstance(p, Box2D) else p.roi for p in proposals]  # type: ignore[attr-defined]
    gts = [o for o in objects if o.ref_box is not None]
    names = list(class_names) if class_names is not None else sorted({o.class_label for o in gts})
    index = {name: i + 1 for i, name in enumerate(names)}

    dtype = torch.float64
    assignment = assign_labels(
        boxes_to_tensor(rois, dtype),
        boxes_to_tensor([o.ref_box for o in gts], dtype),  # type: ignore[misc]
        torch.tensor([index[o.class_label] for o in gts], dtype=torch.long),
        boxes_to_tensor([o.sensed_box or o.ref_box for o in gts], dtype),  # type: ignore[misc]
        torch.tensor([o.sensed_box is not None for o in gts], dtype=torch.bool),
        fg_thr,
        bg_thr,
        sensed_rois=boxes_to_tensor(list(sensed_rois), dtype) if sensed_rois is not None else None,
    )
    out = []
    for i in range(len(rois)):
        label = int(assignment.labels[i])
        if label <= 0:
            out.append(RoILabel(label=label))
            continue
        obj = gts[int(assignment.matched[i])]
        shift = None
        if bool(assignment.has_shift[i]):
            t = assignment.shift_targets[i]
            shift = ShiftTarget(t_x=float(t[0]), t_y=float(t[1]))
        out.append(
            RoILabel(
                label=label,
                pair_id=obj.pair_id,
                reg_target=tuple(float(v) for v in assignment.reg_targets[i]),  # type: ignore[arg-type]
                shift_target=shift,
            )
        )
    return out
