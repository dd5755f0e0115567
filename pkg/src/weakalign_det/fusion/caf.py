"""
Confidence-aware fusion.

Each modality gets an auxiliary classifier on its region feature. With
foreground probability ``p1`` and background probability ``p0 = 1 - p1``:

    w_ref      = |p1_ref - p0_ref|
    w_sensed   = |p1_sensed - p0_sensed|
    w_disagree = 1 - |p1_ref - p1_sensed|

    fused = w_ref * rf_ref + w_sensed * w_disagree * rf_sensed

The disagreement weight only scales the sensed branch; the reference frame is
the anchor.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor, nn

from weakalign_det.core.errors import ConfigurationError, ProbabilityError

PROBABILITY_TOLERANCE = 1e-6

Probability = float


def _check_probability(name: str, p: float) -> None:
    if not (0.0 <= p <= 1.0):
        raise ProbabilityError(f"{name} must lie in [0, 1], got {p}")


def modality_confidence(p1: Probability, p0: Probability) -> float:
    _check_probability("p1", p1)
    _check_probability("p0", p0)
    if abs(p1 + p0 - 1.0) > PROBABILITY_TOLERANCE:
        raise ProbabilityError(f"p1 + p0 must equal 1, got {p1} + {p0}")
    return abs(p1 - p0)


def disagreement_weight(p1_ref: Probability, p1_sensed: Probability) -> float:
    _check_probability("p1_ref", p1_ref)
    _check_probability("p1_sensed", p1_sensed)
    return 1.0 - abs(p1_ref - p1_sensed)


class ConfidenceWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    p1_ref: float = Field(ge=0.0, le=1.0)
    p0_ref: float = Field(ge=0.0, le=1.0)
    p1_sensed: float = Field(ge=0.0, le=1.0)
    p0_sensed: float = Field(ge=0.0, le=1.0)
    w_ref: float = Field(ge=0.0, le=1.0)
    w_sensed: float = Field(ge=0.0, le=1.0)
    w_disagree: float = Field(ge=0.0, le=1.0)

    @classmethod
    def from_probabilities(cls, p1_ref: Probability, p1_sensed: Probability) -> ConfidenceWeights:
        p0_ref, p0_sensed = 1.0 - p1_ref, 1.0 - p1_sensed
        return cls(
            p1_ref=p1_ref,
            p0_ref=p0_ref,
            p1_sensed=p1_sensed,
            p0_sensed=p0_sensed,
            w_ref=modality_confidence(p1_ref, p0_ref),
            w_sensed=modality_confidence(p1_sensed, p0_sensed),
            w_disagree=disagreement_weight(p1_ref, p1_sensed),
        )

    @property
    def sensed_multiplier(self) -> float:
        return self.w_sensed * self.w_disagree


def reweight_fuse(rf_ref: Tensor, rf_sensed_aligned: Tensor, w: ConfidenceWeights) -> Tensor:
    if rf_ref.shape != rf_sensed_aligned.shape:
        raise ConfigurationError(
            "region features differ in shape: "
            f"{tuple(rf_ref.shape)} vs {tuple(rf_sensed_aligned.shape)}"
        )
    return w.w_ref * rf_ref + w.sensed_multiplier * rf_sensed_aligned


def _broadcast(weight: Tensor, like: Tensor) -> Tensor:
    return weight.reshape(weight.shape + (1,) * (like.dim() - weight.dim()))


def reweight_fuse_tensor(
    rf_ref: Tensor, rf_sensed_aligned: Tensor, w_ref: Tensor, sensed_multiplier: Tensor
) -> Tensor:
    """Batched :func:`reweight_fuse` with per-RoI (K,) weights; differentiable through the weights."""
    if rf_ref.shape != rf_sensed_aligned.shape:
        raise ConfigurationError(
            "region features differ in shape: "
            f"{tuple(rf_ref.shape)} vs {tuple(rf_sensed_aligned.shape)}"
        )
    sensed = _broadcast(sensed_multiplier, rf_sensed_aligned) * rf_sensed_aligned
    return _broadcast(w_ref, rf_ref) * rf_ref + sensed


def foreground_probability(logits: Tensor) -> Tensor:
    """Collapse (K, num_classes + 1) logits into p1 = 1 - P(background)."""
    return 1.0 - torch.softmax(logits, dim=-1)[:, 0]


@dataclass
class FusionOutputs:
    fused: Tensor
    aux_ref_logits: Tensor | None
    aux_sensed_logits: Tensor | None
    w_ref: Tensor | None
    w_sensed: Tensor | None
    w_disagree: Tensor | None


def fuse_from_logits(
    rf_ref: Tensor,
    rf_sensed_aligned: Tensor,
    aux_ref_logits: Tensor,
    aux_sensed_logits: Tensor,
    sensed_multiplier: Tensor | float | None = None,
) -> FusionOutputs:
    """Confidence weights from the auxiliary logits, then the reweighted sum."""
    p1_ref = foreground_probability(aux_ref_logits)
    p1_sensed = foreground_probability(aux_sensed_logits)
    w_ref = torch.abs(2.0 * p1_ref - 1.0)
    w_sensed = torch.abs(2.0 * p1_sensed - 1.0)
    w_disagree = 1.0 - torch.abs(p1_ref - p1_sensed)
    if sensed_multiplier is None:
        multiplier = w_sensed * w_disagree
    else:
        multiplier = torch.as_tensor(sensed_multiplier, dtype=rf_ref.dtype).expand_as(w_ref)
    fused = reweight_fuse_tensor(rf_ref, rf_sensed_aligned, w_ref, multiplier)
    return FusionOutputs(fused, aux_ref_logits, aux_sensed_logits, w_ref, w_sensed, w_disagree)


class ConfidenceAwareFusion(nn.Module):
    def __init__(
        self,
        in_channels: int,
        pool_size: tuple[int, int],
        num_classes: int,
        enabled: bool = True,
    ):
        super().__init__()
        in_features = in_channels * pool_size[0] * pool_size[1]
        self.aux_ref = nn.Sequential(nn.Flatten(), nn.Linear(in_features, num_classes + 1))
        self.aux_sensed = nn.Sequential(nn.Flatten(), nn.Linear(in_features, num_classes + 1))
        for aux in (self.aux_ref, self.aux_sensed):
            nn.init.normal_(aux[1].weight, std=0.01)
            nn.init.zeros_(aux[1].bias)
        self.enabled = enabled

    def forward(
        self,
        rf_ref: Tensor,
        rf_sensed_aligned: Tensor,
        sensed_multiplier: Tensor | float | None = None,
    ) -> FusionOutputs:
        """``sensed_multiplier`` replaces ``w_sensed * w_disagree`` when given."""
        if rf_ref.shape != rf_sensed_aligned.shape:
            raise ConfigurationError(
                "region features differ in shape: "
                f"{tuple(rf_ref.shape)} vs {tuple(rf_sensed_aligned.shape)}"
            )
        if not self.enabled:
            return FusionOutputs(rf_ref + rf_sensed_aligned, None, None, None, None, None)

        return fuse_from_logits(
            rf_ref,
            rf_sensed_aligned,
            self.aux_ref(rf_ref),
            self.aux_sensed(rf_sensed_aligned),
            sensed_multiplier,
        )
