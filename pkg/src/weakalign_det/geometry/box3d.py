"""
RGB-D 3D box initialization, seven-entry target encoding and regression loss.

A 3D box is ``[x_cam, y_cam, z_cam, l, w, h, theta]`` in the (gravity aligned)
camera frame: x right, y down, z forward. ``l`` runs along x and ``w`` along z
when ``theta`` is 0; ``theta`` is the yaw about the vertical axis.

Offsets between an initialized box and a target box:

    v_x = (x* - x) / l      v_l = ln(l* / l)
    v_y = (y* - y) / h      v_w = ln(w* / w)
    v_z = (z* - z) / w      v_h = ln(h* / h)
    v_theta = theta* - theta
"""
from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from pydantic import BaseModel, ConfigDict, FiniteFloat, PositiveFloat
from torch import Tensor

from weakalign_det.core.config import settings
from weakalign_det.core.errors import ConfigurationError, DepthInitError
from weakalign_det.geometry.boxes import Box2D

logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2.0


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    f: PositiveFloat
    o_x: FiniteFloat
    o_y: FiniteFloat


class Box3D(BaseModel):
    model_config = ConfigDict(frozen=True)

    x_cam: FiniteFloat
    y_cam: FiniteFloat
    z_cam: FiniteFloat
    l: PositiveFloat  # noqa: E741
    w: PositiveFloat
    h: PositiveFloat
    theta: FiniteFloat = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x_cam, self.y_cam, self.z_cam, self.l, self.w, self.h, self.theta)


class Box3DTargets(BaseModel):
    model_config = ConfigDict(frozen=True)

    v_x: FiniteFloat = 0.0
    v_y: FiniteFloat = 0.0
    v_z: FiniteFloat = 0.0
    v_l: FiniteFloat = 0.0
    v_w: FiniteFloat = 0.0
    v_h: FiniteFloat = 0.0
    v_theta: FiniteFloat = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.v_x, self.v_y, self.v_z, self.v_l, self.v_w, self.v_h, self.v_theta)

    @classmethod
    def from_sequence(cls, values: "list[float] | tuple[float, ...] | Tensor") -> Box3DTargets:
        v = [float(x) for x in values]
        if len(v) != 7:
            raise ValueError(f"expected 7 box offsets, got {len(v)}")
        return cls(v_x=v[0], v_y=v[1], v_z=v[2], v_l=v[3], v_w=v[4], v_h=v[5], v_theta=v[6])


ClassDims = Mapping[str, tuple[float, float, float]]


def wrap_angle(theta: float) -> float:
    """Fold a yaw into [-pi/2, pi/2]; a box turned by pi is the same box."""
    if -HALF_PI <= theta <= HALF_PI:
        return theta
    return (theta + HALF_PI) % math.pi - HALF_PI


def load_class_dims(path: Path | None = None) -> dict[str, tuple[float, float, float]]:
    """Read the class-average (l, w, h) table, keyed by class label."""
    path = path or settings.resolved_config_dir / "class_dims.yaml"
    if not path.exists():
        raise ConfigurationError(f"class dimension table {path} not found")
    with path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}

    dims: dict[str, tuple[float, float, float]] = {}
    for label, entry in (data.get("classes") or {}).items():
        l, w, h = (float(entry[k]) for k in ("l", "w", "h"))  # noqa: E741
        if min(l, w, h) <= 0:
            raise ConfigurationError(f"class {label!r} has non-positive dimensions")
        dims[str(label)] = (l, w, h)
    return dims


def valid_depths(depth_patch: np.ndarray) -> np.ndarray:
    depths = np.asarray(depth_patch, dtype=np.float64).ravel()
    return depths[np.isfinite(depths) & (depths > 0)]


def init_box3d(
    roi: Box2D,
    depth_patch: np.ndarray,
    intrinsics: CameraIntrinsics,
    class_avg_dims: ClassDims,
    class_label: str,
) -> Box3D:
    depths = valid_depths(depth_patch)
    if depths.size == 0:
        raise DepthInitError(f"no valid depth inside region centred at ({roi.x:.1f}, {roi.y:.1f})")
    if class_label not in class_avg_dims:
        raise ConfigurationError(f"no average dimensions for class {class_label!r}")

    z = float(np.median(depths))
    l, w, h = class_avg_dims[class_label]  # noqa: E741
    return Box3D(
        x_cam=z * (roi.x - intrinsics.o_x) / intrinsics.f,
        y_cam=z * (roi.y - intrinsics.o_y) / intrinsics.f,
        z_cam=z,
        l=l,
        w=w,
        h=h,
        theta=0.0,
    )


def encode_3d_targets(init: Box3D, gt: Box3D) -> Box3DTargets:
    return Box3DTargets(
        v_x=(gt.x_cam - init.x_cam) / init.l,
        v_y=(gt.y_cam - init.y_cam) / init.h,
        v_z=(gt.z_cam - init.z_cam) / init.w,
        v_l=math.log(gt.l / init.l),
        v_w=math.log(gt.w / init.w),
        v_h=math.log(gt.h / init.h),
        v_theta=gt.theta - init.theta,
    )


def decode_3d(init: Box3D, v: Box3DTargets) -> Box3D:
    return Box3D(
        x_cam=init.x_cam + v.v_x * init.l,
        y_cam=init.y_cam + v.v_y * init.h,
        z_cam=init.z_cam + v.v_z * init.w,
        l=init.l * math.exp(v.v_l),
        w=init.w * math.exp(v.v_w),
        h=init.h * math.exp(v.v_h),
        theta=wrap_angle(init.theta + v.v_theta),
    )


def loss_3d(p_star: Tensor | int, v: Tensor, v_star: Tensor, beta: float = 1.0) -> Tensor:
    """``[p* >= 1] * smoothL1(v* - v)`` summed over the seven entries.

    Accepts a single RoI (``v`` of shape (7,)) or a batch (N, 7); a batch
    returns the sum over RoIs.
    """
    p = torch.as_tensor(p_star, device=v.device)
    per_entry = F.smooth_l1_loss(v, v_star, reduction="none", beta=beta)
    per_roi = per_entry.sum(dim=-1)
    gate = (p >= 1).to(per_roi.dtype)
    return (gate * per_roi).sum()
