"""Fast R-CNN style box deltas between center-form boxes (N, 4)."""
from __future__ import annotations

import math
from collections.abc import Sequence

import torch
from torch import Tensor

BBOX_REG_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_DW_CLIP = math.log(1000.0 / 16)


def encode_deltas(
    boxes: Tensor,
    anchors: Tensor,
    weights: Sequence[float] = BBOX_REG_WEIGHTS,
) -> Tensor:
    if boxes.shape != anchors.shape:
        raise ValueError(
            f"boxes and anchors must share the same shape; got {tuple(boxes.shape)} "
            f"and {tuple(anchors.shape)}"
        )
    wx, wy, ww, wh = weights
    dx = wx * (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    dy = wy * (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    dw = ww * torch.log(boxes[..., 2] / anchors[..., 2])
    dh = wh * torch.log(boxes[..., 3] / anchors[..., 3])
    return torch.stack((dx, dy, dw, dh), dim=-1)


def decode_deltas(
    deltas: Tensor,
    anchors: Tensor,
    weights: Sequence[float] = BBOX_REG_WEIGHTS,
) -> Tensor:
    wx, wy, ww, wh = weights
    dw = (deltas[..., 2] / ww).clamp(max=_DW_CLIP)
    dh = (deltas[..., 3] / wh).clamp(max=_DW_CLIP)
    cx = anchors[..., 0] + deltas[..., 0] / wx * anchors[..., 2]
    cy = anchors[..., 1] + deltas[..., 1] / wy * anchors[..., 3]
    w = anchors[..., 2] * torch.exp(dw)
    h = anchors[..., 3] * torch.exp(dh)
    return torch.stack((cx, cy, w, h), dim=-1)
