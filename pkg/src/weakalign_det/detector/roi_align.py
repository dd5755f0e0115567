"""
Bilinear RoI pooling built on ``grid_sample``.

Feature cell ``k`` covers image pixels ``[k * stride, (k + 1) * stride)``, so an
image coordinate ``x`` maps to the normalized sampling coordinate
``2 * x / (stride * W_f) - 1`` (``align_corners=False``). Samples outside the
map read zeros. The output is differentiable with respect to both the
features and the RoI coordinates.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from weakalign_det.geometry.boxes import cxcywh_to_xyxy

DEFAULT_POOL_SIZE = (7, 7)
DEFAULT_SAMPLING_RATIO = 2


def _sampling_grid(
    rois: Tensor,
    out_size: tuple[int, int],
    sampling_ratio: int,
    map_extent: tuple[float, float],
) -> Tensor:
    """(K, out_h * sr, out_w * sr, 2) normalized sample positions."""
    out_h, out_w = out_size
    extent_w, extent_h = map_extent
    x1, y1, x2, y2 = cxcywh_to_xyxy(rois).unbind(-1)
    steps_x = (torch.arange(out_w * sampling_ratio, dtype=rois.dtype, device=rois.device) + 0.5) / (
        out_w * sampling_ratio
    )
    steps_y = (torch.arange(out_h * sampling_ratio, dtype=rois.dtype, device=rois.device) + 0.5) / (
        out_h * sampling_ratio
    )
    xs = x1[:, None] + (x2 - x1)[:, None] * steps_x[None, :]  # (K, Sx)
    ys = y1[:, None] + (y2 - y1)[:, None] * steps_y[None, :]  # (K, Sy)
    gx = 2.0 * xs / extent_w - 1.0
    gy = 2.0 * ys / extent_h - 1.0
    k, sx, sy = rois.shape[0], xs.shape[1], ys.shape[1]
    return torch.stack((gx[:, None, :].expand(k, sy, sx), gy[:, :, None].expand(k, sy, sx)), dim=-1)


def roi_align(
    features: Tensor,
    rois: Tensor,
    batch_index: Tensor,
    stride: int,
    out_size: tuple[int, int] = DEFAULT_POOL_SIZE,
    sampling_ratio: int = DEFAULT_SAMPLING_RATIO,
) -> Tensor:
    """Pool center-form image-coordinate ``rois`` (K, 4) from ``features`` (N, C, H, W).

    Returns (K, C, out_h, out_w): each bin averages ``sampling_ratio ** 2``
    bilinear samples.
    """
    if features.dim() != 4:
        raise ValueError(f"features must be (N, C, H, W), got shape {tuple(features.shape)}")
    if sampling_ratio < 1:
        raise ValueError(f"sampling_ratio must be >= 1, got {sampling_ratio}")
    n, c, h, w = features.shape
    out_h, out_w = out_size
    if rois.shape[0] == 0:
        return features.new_zeros((0, c, out_h, out_w))
    grid = _sampling_grid(rois.to(features.dtype), out_size, sampling_ratio, (w * stride, h * stride))
    sampled = F.grid_sample(
        features[batch_index],
        grid,
        mode="bilinear",
        padding_mode="zeros",
        align_corners=False,
    )
    pooled = sampled if sampling_ratio == 1 else F.avg_pool2d(sampled, sampling_ratio, sampling_ratio)
    outside = outside_feature_extent(rois, (h, w), stride)
    if bool(outside.any()):
        # no bleed from border cells into RoIs that miss the map
        pooled = pooled * (~outside).to(pooled.dtype)[:, None, None, None]
    return pooled


def outside_feature_extent(rois: Tensor, feature_size: tuple[int, int], stride: int) -> Tensor:
    """(K,) bool: RoI does not intersect the area covered by the map."""
    height, width = feature_size
    x1, y1, x2, y2 = cxcywh_to_xyxy(rois).unbind(-1)
    return (x2 <= 0) | (y2 <= 0) | (x1 >= width * stride) | (y1 >= height * stride)


def single_batch_index(n: int, device: torch.device | None = None) -> Tensor:
    return torch.zeros(n, dtype=torch.long, device=device)
