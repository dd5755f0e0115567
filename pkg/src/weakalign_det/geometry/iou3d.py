"""Exact IoU of yaw-rotated 3D boxes: bird's-eye polygon overlap times height overlap."""
from __future__ import annotations

import math

from shapely.geometry import Polygon

from weakalign_det.geometry.box3d import Box3D


def ground_polygon(box: Box3D) -> Polygon:
    """Footprint of ``box`` on the ground (x-z) plane."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    half_l, half_w = box.l / 2.0, box.w / 2.0
    corners = []
    for dl, dw in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        lx, lz = dl * half_l, dw * half_w
        corners.append((box.x_cam + c * lx - s * lz, box.z_cam + s * lx + c * lz))
    return Polygon(corners)


def iou_3d(a: Box3D, b: Box3D) -> float:
    top = max(a.y_cam - a.h / 2.0, b.y_cam - b.h / 2.0)
    bottom = min(a.y_cam + a.h / 2.0, b.y_cam + b.h / 2.0)
    h_overlap = bottom - top
    if h_overlap <= 0.0:
        return 0.0

    overlap = ground_polygon(a).intersection(ground_polygon(b)).area * h_overlap
    if overlap <= 0.0:
        return 0.0
    union = a.l * a.w * a.h + b.l * b.w * b.h - overlap
    return overlap / union
