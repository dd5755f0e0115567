"""On-disk dataset layout, training tensors and horizontal-flip augmentation."""
from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor
from torch.utils.data import Dataset

from weakalign_det.core.config import APP_VERSION
from weakalign_det.core.errors import AnnotationError
from weakalign_det.data.annotations import SceneAnnotation, load_annotations, save_annotations
from weakalign_det.data.schemas import Illumination, PairedObject, ScenePair
from weakalign_det.data.shifting import shift_statistics
from weakalign_det.geometry.box3d import Box3D
from weakalign_det.geometry.boxes import Box2D

logger = logging.getLogger(__name__)

ANNOTATIONS_FILE = "annotations.json"
SCENES_DIR = "scenes"
SUMMARY_FILE = "summary.json"


def save_dataset(scenes: Sequence[ScenePair], root: str | Path) -> dict[str, Any]:
    root = Path(root)
    (root / SCENES_DIR).mkdir(parents=True, exist_ok=True)
    save_annotations(scenes, root / ANNOTATIONS_FILE)
    for scene in scenes:
        np.savez(
            root / SCENES_DIR / f"{scene.scene_id}.npz",
            ref=scene.ref_image.astype(np.float32),
            sensed=scene.sensed_image.astype(np.float32),
        )

    histogram = shift_statistics(scenes)
    n_objects = sum(len(s.objects) for s in scenes)
    summary = {
        "version": APP_VERSION,
        "n_scenes": len(scenes),
        "n_objects": n_objects,
        "n_unpaired": histogram.n_unpaired,
        "unpaired_fraction": histogram.n_unpaired / n_objects if n_objects else 0.0,
        "shifted_fraction": histogram.shifted_fraction(),
        "n_night": sum(1 for s in scenes if s.illumination is Illumination.NIGHT),
        "shift_histogram": histogram.model_dump(),
        "checksum": dataset_checksum(root),
    }
    with (root / SUMMARY_FILE).open("w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    logger.info("Saved %d scenes (%d objects) to %s", len(scenes), n_objects, root)
    return summary


def _attach_images(annotation: SceneAnnotation, root: Path) -> ScenePair:
    path = root / SCENES_DIR / f"{annotation.scene_id}.npz"
    if not path.exists():
        raise AnnotationError(
            f"image archive {path} missing", scene_id=annotation.scene_id, field="images"
        )
    with np.load(path) as arrays:
        ref, sensed = arrays["ref"], arrays["sensed"]
    return ScenePair(
        scene_id=annotation.scene_id,
        ref_image=ref,
        sensed_image=sensed,
        objects=annotation.objects,
        extent=annotation.extent,
        shift_field=annotation.shift_field,
        intrinsics=annotation.intrinsics,
        illumination=annotation.illumination,
        depth_scale=annotation.depth_scale,
    )


def load_dataset(root: str | Path) -> list[ScenePair]:
    root = Path(root)
    annotations = load_annotations(root / ANNOTATIONS_FILE)
    return [_attach_images(a, root) for a in annotations]


def dataset_checksum(root: str | Path) -> str:
    """SHA-256 over the annotation bytes and the raw image arrays (zip headers carry mtimes)."""
    root = Path(root)
    digest = hashlib.sha256((root / ANNOTATIONS_FILE).read_bytes())
    for path in sorted((root / SCENES_DIR).glob("*.npz")):
        digest.update(path.name.encode())
        with np.load(path) as arrays:
            for key in ("ref", "sensed"):
                digest.update(np.ascontiguousarray(arrays[key]).tobytes())
    return digest.hexdigest()


def _flip_box(box: Box2D | None, width: int) -> Box2D | None:
    if box is None:
        return None
    return Box2D(x=width - box.x, y=box.y, w=box.w, h=box.h)


def flip_scene(scene: ScenePair) -> ScenePair:
    """Mirror both modalities, every box and the ground-truth field about the vertical axis."""
    width = scene.width
    objects: list[PairedObject] = []
    for obj in scene.objects:
        box3d = obj.box3d
        if box3d is not None and scene.intrinsics is not None:
            k = scene.intrinsics
            box3d = Box3D(
                x_cam=box3d.z_cam * (width - 2.0 * k.o_x) / k.f - box3d.x_cam,
                y_cam=box3d.y_cam,
                z_cam=box3d.z_cam,
                l=box3d.l,
                w=box3d.w,
                h=box3d.h,
                theta=-box3d.theta,
            )
        objects.append(
            obj.model_copy(
                update={
                    "ref_box": _flip_box(obj.ref_box, width),
                    "sensed_box": _flip_box(obj.sensed_box, width),
                    "box3d": box3d,
                }
            )
        )
    return scene.replace(
        ref_image=np.ascontiguousarray(scene.ref_image[:, ::-1]),
        sensed_image=np.ascontiguousarray(scene.sensed_image[:, ::-1]),
        objects=objects,
        shift_field=scene.shift_field.mirrored() if scene.shift_field is not None else None,
    )


@dataclass
class SceneTargets:
    """Ground truth of one scene as tensors, one row per object with a reference box."""

    ref_boxes: Tensor  # (M, 4) center form
    labels: Tensor  # (M,) 1-based class index
    sensed_boxes: Tensor  # (M, 4); rows without a sensed box are zero
    has_sensed: Tensor  # (M,) bool
    box3d: Tensor  # (M, 7)
    has_box3d: Tensor  # (M,) bool


def scene_targets(scene: ScenePair, class_names: Sequence[str]) -> SceneTargets:
    index = {name: i + 1 for i, name in enumerate(class_names)}
    rows = [o for o in scene.objects if o.ref_box is not None]
    ref, sensed, labels, has_sensed, box3d, has_box3d = [], [], [], [], [], []
    for obj in rows:
        if obj.class_label not in index:
            raise AnnotationError(
                f"class {obj.class_label!r} is not one of {list(class_names)}",
                scene_id=scene.scene_id,
                field="class_label",
            )
        ref.append(obj.ref_box.as_tuple())  # type: ignore[union-attr]
        labels.append(index[obj.class_label])
        has_sensed.append(obj.sensed_box is not None)
        sensed.append(obj.sensed_box.as_tuple() if obj.sensed_box is not None else (0.0,) * 4)
        has_box3d.append(obj.box3d is not None)
        box3d.append(obj.box3d.as_tuple() if obj.box3d is not None else (0.0,) * 7)
    return SceneTargets(
        ref_boxes=torch.tensor(ref, dtype=torch.float32).reshape(-1, 4),
        labels=torch.tensor(labels, dtype=torch.long),
        sensed_boxes=torch.tensor(sensed, dtype=torch.float32).reshape(-1, 4),
        has_sensed=torch.tensor(has_sensed, dtype=torch.bool),
        box3d=torch.tensor(box3d, dtype=torch.float32).reshape(-1, 7),
        has_box3d=torch.tensor(has_box3d, dtype=torch.bool),
    )


def scene_images(scene: ScenePair) -> tuple[Tensor, Tensor]:
    """(1, H, W) float tensors for the two streams."""
    ref = torch.from_numpy(np.ascontiguousarray(scene.ref_image, dtype=np.float32))
    sensed = torch.from_numpy(np.ascontiguousarray(scene.sensed_image, dtype=np.float32))
    return ref.unsqueeze(0), sensed.unsqueeze(0)


class PairedSceneDataset(Dataset):
    """Scenes in order, each mirrored with probability ``flip_prob``."""

    def __init__(
        self,
        scenes: Sequence[ScenePair],
        flip_prob: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        self.scenes = list(scenes)
        self.flip_prob = flip_prob
        self.rng = rng or np.random.default_rng(0)

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int) -> ScenePair:
        scene = self.scenes[index]
        if self.flip_prob > 0 and self.rng.uniform() < self.flip_prob:
            return flip_scene(scene)
        return scene
