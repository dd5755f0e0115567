"""
Training losses of the RoI stage.

    L = L_cls + lambda1 * L_shift + lambda2 * L_asc + L_reg   (+ auxiliary terms)

L_shift and L_asc are smooth-L1 penalties averaged over the RoIs that carry a
shift target; L_asc compares the shift predicted for a neighbouring window to
the same target.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from weakalign_det.core.errors import ShiftTargetError
from weakalign_det.geometry.boxes import ShiftTarget


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda1: float = Field(default=0.75, ge=0.0)
    lambda2: float = Field(default=0.25, ge=0.0)
    smooth_l1_beta: float = Field(default=1.0, gt=0.0)


class ShiftPrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    roi_index: int
    predicted: ShiftTarget
    target: ShiftTarget | None = None
    neighbor_predicted: ShiftTarget | None = None


def masked_shift_loss(pred: Tensor, target: Tensor, mask: Tensor, beta: float = 1.0) -> Tensor:
    """(1 / N) * sum over masked RoIs of smoothL1(pred - target), N = number of masked RoIs."""
    per_roi = F.smooth_l1_loss(pred, target, reduction="none", beta=beta).sum(dim=-1)
    weight = mask.to(per_roi.dtype)
    n = weight.sum().clamp(min=1.0)
    return (weight * per_roi).sum() / n


def _stack_targets(
    predictions: Sequence[ShiftPrediction], labels: Sequence[int], use_neighbour: bool
) -> tuple[Tensor, Tensor, Tensor]:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions but {len(labels)} labels")
    preds, targets, mask = [], [], []
    for p, label in zip(predictions, labels, strict=True):
        positive = label >= 1
        if positive and p.target is None:
            raise ShiftTargetError(f"positive RoI {p.roi_index} has no shift target")
        source = p.neighbor_predicted if use_neighbour else p.predicted
        if use_neighbour and positive and source is None:
            raise ValueError(f"positive RoI {p.roi_index} has no neighbour prediction")
        source = source or p.predicted
        target = p.target or ShiftTarget()
        preds.append((source.t_x, source.t_y))
        targets.append((target.t_x, target.t_y))
        mask.append(positive)
    dtype = torch.float64
    return (
        torch.tensor(preds, dtype=dtype).reshape(-1, 2),
        torch.tensor(targets, dtype=dtype).reshape(-1, 2),
        torch.tensor(mask, dtype=torch.bool),
    )


def shift_loss(
    predictions: Sequence[ShiftPrediction], labels: Sequence[int], beta: float = 1.0
) -> float:
    pred, target, mask = _stack_targets(predictions, labels, use_neighbour=False)
    return float(masked_shift_loss(pred, target, mask, beta))


def asc_loss(predictions: Sequence[ShiftPrediction], labels: Sequence[int], beta: float = 1.0) -> float:
    pred, target, mask = _stack_targets(predictions, labels, use_neighbour=True)
    return float(masked_shift_loss(pred, target, mask, beta))


def fast_rcnn_losses(
    cls_logits: Tensor,
    labels: Tensor,
    box_deltas: Tensor,
    reg_targets: Tensor,
    beta: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Cross-entropy over all RoIs and smooth-L1 box refinement over positives, both per RoI."""
    l_cls = F.cross_entropy(cls_logits, labels)
    positive = labels > 0
    l_reg = F.smooth_l1_loss(box_deltas[positive], reg_targets[positive], reduction="sum", beta=beta)
    return l_cls, l_reg / max(1, labels.numel())


@dataclass
class RoIBatchTargets:
    labels: Tensor  # p*
    reg_targets: Tensor  # g*
    shift_targets: Tensor  # t*
    shift_mask: Tensor  # positive and has a sensed box


@dataclass
class LossBreakdown:
    cls: Tensor
    reg: Tensor
    shift: Tensor
    asc: Tensor
    extra: dict[str, Tensor] = field(default_factory=dict)
    total: Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        values = {"cls": self.cls, "reg": self.reg, "shift": self.shift, "asc": self.asc, **self.extra}
        out = {k: float(v.detach()) for k, v in values.items()}
        if self.total is not None:
            out["total"] = float(self.total.detach())
        return out


def multi_task_loss(
    cls_logits: Tensor,
    box_deltas: Tensor,
    shift_pred: Tensor | None,
    asc_pred: Tensor | None,
    targets: RoIBatchTargets,
    cfg: LossConfig,
    extra_terms: Mapping[str, Tensor] | None = None,
) -> LossBreakdown:
    """Weighted RoI-stage loss; ``extra_terms`` (auxiliary, RPN, 3D) are added unweighted."""
    beta = cfg.smooth_l1_beta
    l_cls, l_reg = fast_rcnn_losses(cls_logits, targets.labels, box_deltas, targets.reg_targets, beta)
    zero = cls_logits.sum() * 0.0
    l_shift = (
        masked_shift_loss(shift_pred, targets.shift_targets, targets.shift_mask, beta)
        if shift_pred is not None
        else zero
    )
    l_asc = (
        masked_shift_loss(asc_pred, targets.shift_targets, targets.shift_mask, beta)
        if asc_pred is not None
        else zero
    )
    extra = dict(extra_terms or {})
    total = l_cls + cfg.lambda1 * l_shift + cfg.lambda2 * l_asc + l_reg
    for term in extra.values():
        total = total + term
    return LossBreakdown(cls=l_cls, reg=l_reg, shift=l_shift, asc=l_asc, extra=extra, total=total)
