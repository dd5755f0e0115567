"""RoI jitter and adjacent-neighbour sampling for the shift regressor."""
from __future__ import annotations

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor

from weakalign_det.geometry.boxes import Box2D, ShiftTarget, apply_shift

DEFAULT_JITTER_SIGMA = 0.05

# 4-neighbourhood, in units of the feature stride
NEIGHBOUR_OFFSETS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class JitterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sigma0: float = Field(default=DEFAULT_JITTER_SIGMA, ge=0.0)  # t_x
    sigma1: float = Field(default=DEFAULT_JITTER_SIGMA, ge=0.0)  # t_y


def roi_jitter(roi: Box2D, cfg: JitterConfig, rng: np.random.Generator) -> tuple[Box2D, ShiftTarget]:
    """Move ``roi`` by a random shift t^j; the RoI's shift target becomes ``target - t^j``."""
    t_j = ShiftTarget(t_x=float(rng.normal(0.0, cfg.sigma0)), t_y=float(rng.normal(0.0, cfg.sigma1)))
    return apply_shift(roi, t_j), t_j


def sample_jitter(n: int, cfg: JitterConfig, generator: torch.Generator | None = None) -> Tensor:
    """(n, 2) independent draws t^j_x ~ N(0, sigma0^2), t^j_y ~ N(0, sigma1^2)."""
    noise = torch.randn((n, 2), generator=generator)
    return noise * torch.tensor([cfg.sigma0, cfg.sigma1])


def asc_pair(roi: Box2D, feature_stride: int, rng: np.random.Generator) -> Box2D:
    """``roi`` moved by one feature stride to a uniformly drawn 4-neighbour."""
    if feature_stride < 1:
        raise ValueError(f"feature_stride must be >= 1, got {feature_stride}")
    dx, dy = NEIGHBOUR_OFFSETS[int(rng.integers(len(NEIGHBOUR_OFFSETS)))]
    return roi.translate(dx * feature_stride, dy * feature_stride)


def sample_neighbour_offsets(
    n: int, feature_stride: int, generator: torch.Generator | None = None
) -> Tensor:
    """(n, 2) pixel offsets, each one of the four neighbour moves."""
    choice = torch.randint(len(NEIGHBOUR_OFFSETS), (n,), generator=generator)
    return torch.tensor(NEIGHBOUR_OFFSETS, dtype=torch.float32)[choice] * feature_stride
