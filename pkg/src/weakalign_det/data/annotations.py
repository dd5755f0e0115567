# data/annotations.py
"""
Paired-annotation JSON documents.

Layout (schema_version 1):

    {
      "schema_version": 1,
      "version": "0.1.0",
      "scenes": [
        {
          "scene_id": "scene_00000",
          "extent": [64, 64],
          "illumination": "day",
          "depth_scale": null,
          "intrinsics": null,
          "shift_field": {...},
          "objects": [
            {
              "pair_id": 0,
              "class_label": "pedestrian",
              "boxes": {"ref": [x1, y1, x2, y2], "sensed": [x1, y1, x2, y2]},
              "truncated": {"ref": false, "sensed": false},
              "unpaired": false,
              "occlusion": "none",
              "depth_patch": null,
              "box3d": null
            }
          ]
        }
      ]
    }
"""
from __future__ import annotations

import json
import logging
from collections.abc import Iterable
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from weakalign_det.core.config import APP_VERSION
from weakalign_det.core.errors import AnnotationError
from weakalign_det.data.schemas import Illumination, Occlusion, PairedObject, ScenePair
from weakalign_det.data.shift_field import ShiftField
from weakalign_det.geometry.box3d import Box3D, CameraIntrinsics
from weakalign_det.geometry.boxes import Box2D

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Corners = tuple[float, float, float, float]


class ModalityBoxes(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ref: Corners | None = None
    sensed: Corners | None = None


class ModalityFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ref: bool = False
    sensed: bool = False


class ObjectRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pair_id: int
    class_label: str
    boxes: ModalityBoxes
    truncated: ModalityFlags = Field(default_factory=ModalityFlags)
    unpaired: bool = False
    occlusion: Occlusion = Occlusion.NONE
    depth_patch: list[float] | None = None
    box3d: Box3D | None = None


class SceneAnnotation(BaseModel):
    """Everything about a scene except its pixels."""

    model_config = ConfigDict(frozen=True)

    scene_id: str
    extent: tuple[int, int]
    objects: list[PairedObject] = Field(default_factory=list)
    shift_field: ShiftField | None = None
    intrinsics: CameraIntrinsics | None = None
    illumination: Illumination = Illumination.DAY
    depth_scale: float | None = None

    @classmethod
    def from_scene(cls, scene: ScenePair) -> SceneAnnotation:
        return cls(
            scene_id=scene.scene_id,
            extent=scene.extent,
            objects=scene.objects,
            shift_field=scene.shift_field,
            intrinsics=scene.intrinsics,
            illumination=scene.illumination,
            depth_scale=scene.depth_scale,
        )


def _corners(box: Box2D | None) -> list[float] | None:
    return list(box.to_corners()) if box is not None else None


def _box(corners: Corners | None) -> Box2D | None:
    return Box2D.from_corners(*corners) if corners is not None else None


def _object_record(obj: PairedObject) -> dict[str, Any]:
    return {
        "pair_id": obj.pair_id,
        "class_label": obj.class_label,
        "boxes": {"ref": _corners(obj.ref_box), "sensed": _corners(obj.sensed_box)},
        "truncated": {"ref": obj.ref_truncated, "sensed": obj.sensed_truncated},
        "unpaired": obj.unpaired,
        "occlusion": obj.occlusion.value,
        "depth_patch": obj.depth_patch,
        "box3d": obj.box3d.model_dump() if obj.box3d is not None else None,
    }


def _scene_record(scene: SceneAnnotation | ScenePair) -> dict[str, Any]:
    return {
        "scene_id": scene.scene_id,
        "extent": list(scene.extent),
        "illumination": scene.illumination.value,
        "depth_scale": scene.depth_scale,
        "intrinsics": scene.intrinsics.model_dump() if scene.intrinsics is not None else None,
        "shift_field": scene.shift_field.model_dump() if scene.shift_field is not None else None,
        "objects": [_object_record(o) for o in scene.objects],
    }


def dump_annotations(scenes: Iterable[SceneAnnotation | ScenePair]) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "version": APP_VERSION,
        "scenes": [_scene_record(s) for s in scenes],
    }


def save_annotations(scenes: Iterable[SceneAnnotation | ScenePair], path: str | Path) -> None:
    path = Path(path)
    document = dump_annotations(scenes)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    logger.info("Wrote %d scene annotations to %s", len(document["scenes"]), path)


def _field_name(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"])


def _parse_object(raw: Any, scene_id: str, index: int) -> PairedObject:
    try:
        record = ObjectRecord.model_validate(raw)
        return PairedObject(
            pair_id=record.pair_id,
            class_label=record.class_label,
            ref_box=_box(record.boxes.ref),
            sensed_box=_box(record.boxes.sensed),
            unpaired=record.unpaired,
            occlusion=record.occlusion,
            ref_truncated=record.truncated.ref,
            sensed_truncated=record.truncated.sensed,
            depth_patch=record.depth_patch,
            box3d=record.box3d,
        )
    except ValidationError as e:
        name = _field_name(e)
        field = f"objects[{index}].{name}" if name else f"objects[{index}]"
        raise AnnotationError(
            f"scene {scene_id}: invalid field {field}: {e.errors()[0]['msg']}",
            scene_id=scene_id,
            field=field,
        ) from e


def parse_scene(raw: Any) -> SceneAnnotation:
    if not isinstance(raw, dict):
        raise AnnotationError("scene entry must be an object")
    scene_id = raw.get("scene_id")
    if not isinstance(scene_id, str):
        raise AnnotationError("scene entry without a string scene_id", field="scene_id")
    objects = [_parse_object(o, scene_id, i) for i, o in enumerate(raw.get("objects") or [])]
    try:
        return SceneAnnotation.model_validate({**raw, "objects": objects})
    except ValidationError as e:
        field = _field_name(e) or "scene"
        raise AnnotationError(
            f"scene {scene_id}: invalid field {field}: {e.errors()[0]['msg']}",
            scene_id=scene_id,
            field=field,
        ) from e


def parse_annotations(document: Any) -> list[SceneAnnotation]:
    if not isinstance(document, dict):
        raise AnnotationError("annotation document must be a JSON object")
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise AnnotationError(
            f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}",
            field="schema_version",
        )
    scenes = [parse_scene(raw) for raw in document.get("scenes") or []]
    ids = [s.scene_id for s in scenes]
    if len(ids) != len(set(ids)):
        raise AnnotationError("duplicate scene_id in annotation document", field="scene_id")
    return scenes


def load_annotations(path: str | Path) -> list[SceneAnnotation]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError as e:
        raise AnnotationError(f"annotation file {path} not found") from e
    except json.JSONDecodeError as e:
        raise AnnotationError(f"annotation file {path} is not valid JSON: {e}") from e
    scenes = parse_annotations(document)
    logger.debug("Loaded %d scene annotations from %s", len(scenes), path)
    return scenes
