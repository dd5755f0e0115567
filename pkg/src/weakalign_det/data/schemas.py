"""Paired-annotation data model: objects located in both modalities of a scene pair."""
from __future__ import annotations

from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, model_validator

from weakalign_det.data.shift_field import ShiftField
from weakalign_det.geometry.box3d import Box3D, CameraIntrinsics
from weakalign_det.geometry.boxes import Box2D


class Occlusion(str, Enum):
    NONE = "none"
    PARTIAL = "partial"
    HEAVY = "heavy"

    @property
    def rank(self) -> int:
        return ("none", "partial", "heavy").index(self.value)


class Illumination(str, Enum):
    DAY = "day"
    NIGHT = "night"


class Modality(str, Enum):
    REF = "ref"
    SENSED = "sensed"


class PairedObject(BaseModel):
    model_config = ConfigDict(frozen=True)

    pair_id: int
    class_label: str
    ref_box: Box2D | None = None
    sensed_box: Box2D | None = None
    unpaired: bool = False
    occlusion: Occlusion = Occlusion.NONE
    ref_truncated: bool = False
    sensed_truncated: bool = False
    depth_patch: list[float] | None = None
    box3d: Box3D | None = None

    @model_validator(mode="after")
    def _check_pairing(self) -> PairedObject:
        present = (self.ref_box is not None) + (self.sensed_box is not None)
        if present == 0:
            raise ValueError("at least one of ref_box, sensed_box must be present")
        if self.unpaired != (present == 1):
            raise ValueError(
                "unpaired must be true exactly when one box is present "
                f"(unpaired={self.unpaired}, boxes present={present})"
            )
        return self

    def box(self, modality: Modality) -> Box2D | None:
        return self.ref_box if modality is Modality.REF else self.sensed_box

    def truncated(self, modality: Modality) -> bool:
        return self.ref_truncated if modality is Modality.REF else self.sensed_truncated

    @property
    def is_paired(self) -> bool:
        return self.ref_box is not None and self.sensed_box is not None


class ScenePair(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scene_id: str
    ref_image: np.ndarray
    sensed_image: np.ndarray
    objects: list[PairedObject] = Field(default_factory=list)
    extent: tuple[int, int]  # (width, height) of the evaluation frame
    shift_field: ShiftField | None = None
    intrinsics: CameraIntrinsics | None = None
    illumination: Illumination = Illumination.DAY
    depth_scale: float | None = None  # meters per unit of the sensed image (RGB-D)

    @model_validator(mode="after")
    def _check_scene(self) -> ScenePair:
        for name in ("ref_image", "sensed_image"):
            image = getattr(self, name)
            if image.ndim != 2:
                raise ValueError(f"{name} must be a 2-D array, got shape {image.shape}")
        ids = [o.pair_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError(f"pair_id values must be unique within scene {self.scene_id}")
        return self

    @property
    def width(self) -> int:
        return self.extent[0]

    @property
    def height(self) -> int:
        return self.extent[1]

    @property
    def is_rgbd(self) -> bool:
        return self.depth_scale is not None

    def depth_map(self) -> np.ndarray:
        """Sensed image in meters (RGB-D scenes)."""
        if self.depth_scale is None:
            raise ValueError(f"scene {self.scene_id} carries no depth")
        return self.sensed_image.astype(np.float64) * self.depth_scale

    def replace(self, **changes: Any) -> ScenePair:
        return self.model_copy(update=changes)


class ShiftFieldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_shift: NonNegativeFloat = 3.0
    edge_gain: PositiveFloat = 1.5
    smoothness_scale: PositiveFloat = 128.0
    noise_sigma: NonNegativeFloat = 0.5
    unpaired_rate: float = Field(default=0.125, ge=0.0, le=1.0)
    direction_deg: float | None = None  # isotropic when unset
