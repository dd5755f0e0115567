"""
Axis-aligned box arithmetic and the shift-target parameterization.

Boxes are stored center-form ``(x, y, w, h)`` in pixels. A shift target
``(t_x, t_y)`` expresses the displacement of a sensed box relative to a
reference box in units of the reference width and height:

    t_x = (x_s - x_r) / w_r
    t_y = (y_s - y_r) / h_r

``apply_shift`` is the inverse and moves a box by ``t * (w, h)``.
The ``*_tensor`` helpers are batched equivalents on ``(N, 4)`` tensors used
inside the detector; they are differentiable.
"""
from __future__ import annotations

import torch
from pydantic import BaseModel, ConfigDict, FiniteFloat, PositiveFloat
from torch import Tensor

DEFAULT_CONTEXT_FACTOR = 1.5


class Box2D(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: FiniteFloat
    y: FiniteFloat
    w: PositiveFloat
    h: PositiveFloat

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> Box2D:
        return cls(x=(x1 + x2) / 2.0, y=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def area(self) -> float:
        return self.w * self.h

    def translate(self, dx: float, dy: float) -> Box2D:
        return Box2D(x=self.x + dx, y=self.y + dy, w=self.w, h=self.h)

    def inside(self, width: float, height: float) -> bool:
        x1, y1, x2, y2 = self.to_corners()
        return x1 >= 0.0 and y1 >= 0.0 and x2 <= width and y2 <= height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


class ShiftTarget(BaseModel):
    model_config = ConfigDict(frozen=True)

    t_x: FiniteFloat = 0.0
    t_y: FiniteFloat = 0.0

    def __sub__(self, other: ShiftTarget) -> ShiftTarget:
        return ShiftTarget(t_x=self.t_x - other.t_x, t_y=self.t_y - other.t_y)

    def __add__(self, other: ShiftTarget) -> ShiftTarget:
        return ShiftTarget(t_x=self.t_x + other.t_x, t_y=self.t_y + other.t_y)


def iou(a: Box2D, b: Box2D) -> float:
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def shift_targets(reference: Box2D, sensed: Box2D) -> ShiftTarget:
    return ShiftTarget(
        t_x=(sensed.x - reference.x) / reference.w,
        t_y=(sensed.y - reference.y) / reference.h,
    )


def apply_shift(roi: Box2D, t: ShiftTarget) -> Box2D:
    return Box2D(x=roi.x + t.t_x * roi.w, y=roi.y + t.t_y * roi.h, w=roi.w, h=roi.h)


def enlarge_roi(
    roi: Box2D,
    context_factor: float = DEFAULT_CONTEXT_FACTOR,
    image_bounds: tuple[float, float] | None = None,
) -> Box2D:
    """Scale ``roi`` about its center, then clip to ``image_bounds`` (width, height).

    Clipping may move the center. A RoI lying entirely outside the image keeps
    its unclipped scaled extent.
    """
    if context_factor < 1.0:
        raise ValueError(f"context_factor must be >= 1, got {context_factor}")
    scaled = Box2D(x=roi.x, y=roi.y, w=roi.w * context_factor, h=roi.h * context_factor)
    if image_bounds is None:
        return scaled
    width, height = image_bounds
    if scaled.inside(width, height):
        return scaled
    x1, y1, x2, y2 = scaled.to_corners()
    x1, x2 = max(x1, 0.0), min(x2, float(width))
    y1, y2 = max(y1, 0.0), min(y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return scaled
    return Box2D.from_corners(x1, y1, x2, y2)


# --- batched tensor forms (N, 4) center-form ---


def cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), dim=-1)


def shift_targets_tensor(reference: Tensor, sensed: Tensor) -> Tensor:
    tx = (sensed[..., 0] - reference[..., 0]) / reference[..., 2]
    ty = (sensed[..., 1] - reference[..., 1]) / reference[..., 3]
    return torch.stack((tx, ty), dim=-1)


def apply_shift_tensor(rois: Tensor, t: Tensor) -> Tensor:
    cx = rois[..., 0] + t[..., 0] * rois[..., 2]
    cy = rois[..., 1] + t[..., 1] * rois[..., 3]
    return torch.stack((cx, cy, rois[..., 2], rois[..., 3]), dim=-1)


def enlarge_rois_tensor(
    rois: Tensor,
    context_factor: float,
    image_bounds: tuple[float, float],
) -> Tensor:
    """Batched :func:`enlarge_roi` on center-form rois."""
    scaled = torch.cat((rois[..., :2], rois[..., 2:] * context_factor), dim=-1)
    width, height = image_bounds
    xyxy = cxcywh_to_xyxy(scaled)
    x1 = xyxy[..., 0].clamp(min=0.0, max=width)
    y1 = xyxy[..., 1].clamp(min=0.0, max=height)
    x2 = xyxy[..., 2].clamp(min=0.0, max=width)
    y2 = xyxy[..., 3].clamp(min=0.0, max=height)
    clipped = xyxy_to_cxcywh(torch.stack((x1, y1, x2, y2), dim=-1))
    degenerate = ((x2 - x1) <= 0) | ((y2 - y1) <= 0)
    return torch.where(degenerate.unsqueeze(-1), scaled, clipped)


def boxes_to_tensor(boxes: list[Box2D], dtype: torch.dtype = torch.float32) -> Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_tuple() for b in boxes], dtype=dtype)


def tensor_to_boxes(boxes: Tensor) -> list[Box2D]:
    return [Box2D(x=float(b[0]), y=float(b[1]), w=float(b[2]), h=float(b[3])) for b in boxes]
