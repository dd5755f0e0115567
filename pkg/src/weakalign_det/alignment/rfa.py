"""
Region feature alignment.

For every RoI both modalities are pooled from a context-enlarged window, the
two region features are combined (sum or concatenation) and two fully
connected layers regress the shift ``(t_x, t_y)`` of the sensed region. The
sensed features are then pooled again at the shifted RoI.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor, nn

from weakalign_det.core.errors import ConfigurationError
from weakalign_det.detector.backbone import FeatureMap
from weakalign_det.detector.roi_align import (
    DEFAULT_POOL_SIZE,
    DEFAULT_SAMPLING_RATIO,
    roi_align,
    single_batch_index,
)
from weakalign_det.geometry.boxes import (
    DEFAULT_CONTEXT_FACTOR,
    Box2D,
    ShiftTarget,
    apply_shift_tensor,
    boxes_to_tensor,
    enlarge_rois_tensor,
)

logger = logging.getLogger(__name__)


class Combiner(str, Enum):
    SUM = "sum"
    CONCAT = "concat"


class RegionShiftHead(nn.Module):
    def __init__(
        self,
        in_channels: int,
        pool_size: tuple[int, int] = DEFAULT_POOL_SIZE,
        combiner: Combiner = Combiner.SUM,
        fc_dim: int = 128,
    ):
        super().__init__()
        self.combiner = Combiner(combiner)
        self.in_channels = in_channels
        self.pool_size = tuple(pool_size)
        in_features = in_channels * pool_size[0] * pool_size[1]
        if self.combiner is Combiner.CONCAT:
            in_features *= 2
        self.fc1 = nn.Linear(in_features, fc_dim)
        self.fc2 = nn.Linear(fc_dim, 2)
        nn.init.kaiming_uniform_(self.fc1.weight, nonlinearity="relu")
        nn.init.zeros_(self.fc1.bias)
        # starts at "no shift" for every RoI
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def combine(self, rf_ref: Tensor, rf_sensed: Tensor) -> Tensor:
        if rf_ref.shape != rf_sensed.shape:
            raise ConfigurationError(
                f"region features differ in shape: {tuple(rf_ref.shape)} vs {tuple(rf_sensed.shape)}"
            )
        if tuple(rf_ref.shape[-3:]) != (self.in_channels, *self.pool_size):
            raise ConfigurationError(
                f"region features of shape {tuple(rf_ref.shape[-3:])} do not match the head "
                f"({self.in_channels}, {self.pool_size[0]}, {self.pool_size[1]})"
            )
        if self.combiner is Combiner.SUM:
            return (rf_ref + rf_sensed).flatten(1)
        return torch.cat((rf_ref.flatten(1), rf_sensed.flatten(1)), dim=1)

    def forward(self, rf_ref: Tensor, rf_sensed: Tensor) -> Tensor:
        """(K, C, H, W) pair -> (K, 2) shifts in RoI width/height units."""
        x = torch.relu(self.fc1(self.combine(rf_ref, rf_sensed)))
        return self.fc2(x)


def predict_region_shift(rf_ref: Tensor, rf_sensed: Tensor, head: RegionShiftHead) -> Tensor:
    """Shift per RoI; a single (C, H, W) pair gives shape (2,)."""
    single = rf_ref.dim() == 3
    if single:
        rf_ref, rf_sensed = rf_ref.unsqueeze(0), rf_sensed.unsqueeze(0)
    t = head(rf_ref, rf_sensed)
    return t[0] if single else t


def to_shift_targets(t: Tensor) -> list[ShiftTarget]:
    return [ShiftTarget(t_x=float(row[0]), t_y=float(row[1])) for row in t.detach().reshape(-1, 2)]


def align_and_repool(
    f_sensed: FeatureMap,
    roi: Box2D,
    t: ShiftTarget,
    out_size: tuple[int, int] = DEFAULT_POOL_SIZE,
    sampling_ratio: int = DEFAULT_SAMPLING_RATIO,
) -> Tensor:
    """Sensed region feature (C, H, W) pooled at ``apply_shift(roi, t)``."""
    features = f_sensed.batched()
    rois = boxes_to_tensor([roi], dtype=features.dtype)
    shift = torch.tensor([[t.t_x, t.t_y]], dtype=features.dtype)
    aligned = apply_shift_tensor(rois, shift)
    index = single_batch_index(1, features.device)
    return roi_align(features, aligned, index, f_sensed.stride, out_size, sampling_ratio)[0]


@dataclass
class AlignmentOutputs:
    shift: Tensor  # (K, 2) predicted t
    aligned_rois: Tensor  # (K, 4) sensed RoIs moved by the detached shift
    rf_ref: Tensor  # (K, C, H, W)
    rf_sensed: Tensor  # (K, C, H, W) pooled at aligned_rois


class RegionFeatureAlignment(nn.Module):
    def __init__(
        self,
        in_channels: int,
        stride: int,
        image_size: tuple[int, int],
        pool_size: tuple[int, int] = DEFAULT_POOL_SIZE,
        sampling_ratio: int = DEFAULT_SAMPLING_RATIO,
        context_factor: float = DEFAULT_CONTEXT_FACTOR,
        combiner: Combiner = Combiner.SUM,
        fc_dim: int = 128,
        enabled: bool = True,
    ):
        super().__init__()
        self.head = RegionShiftHead(in_channels, pool_size, combiner, fc_dim)
        self.stride = stride
        self.image_size = image_size  # (height, width)
        self.pool_size = tuple(pool_size)
        self.sampling_ratio = sampling_ratio
        self.context_factor = context_factor
        self.enabled = enabled

    def _pool(self, features: Tensor, rois: Tensor, batch_index: Tensor) -> Tensor:
        return roi_align(features, rois, batch_index, self.stride, self.pool_size, self.sampling_ratio)

    def predict(
        self, f_ref: Tensor, f_sensed: Tensor, ref_rois: Tensor, sensed_rois: Tensor, batch_index: Tensor
    ) -> Tensor:
        """Shift of each sensed RoI from the two context-enlarged region features."""
        bounds = (float(self.image_size[1]), float(self.image_size[0]))
        ctx_ref = enlarge_rois_tensor(ref_rois, self.context_factor, bounds)
        ctx_sensed = enlarge_rois_tensor(sensed_rois, self.context_factor, bounds)
        return self.head(
            self._pool(f_ref, ctx_ref, batch_index), self._pool(f_sensed, ctx_sensed, batch_index)
        )

    def forward(
        self,
        f_ref: Tensor,
        f_sensed: Tensor,
        ref_rois: Tensor,
        batch_index: Tensor,
        sensed_rois: Tensor | None = None,
    ) -> AlignmentOutputs:
        sensed_rois = ref_rois if sensed_rois is None else sensed_rois
        rf_ref = self._pool(f_ref, ref_rois, batch_index)
        if not self.enabled:
            zeros = ref_rois.new_zeros((ref_rois.shape[0], 2))
            return AlignmentOutputs(
                shift=zeros,
                aligned_rois=sensed_rois,
                rf_ref=rf_ref,
                rf_sensed=self._pool(f_sensed, sensed_rois, batch_index),
            )
        shift = self.predict(f_ref, f_sensed, ref_rois, sensed_rois, batch_index)
        # the shift head learns from the shift loss only
        aligned = apply_shift_tensor(sensed_rois, shift.detach())
        return AlignmentOutputs(
            shift=shift,
            aligned_rois=aligned,
            rf_ref=rf_ref,
            rf_sensed=self._pool(f_sensed, aligned, batch_index),
        )
