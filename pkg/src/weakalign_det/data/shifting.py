"""Global sensed-side translation, modality swapping and per-object shift statistics."""
from __future__ import annotations

import logging
import math
from collections.abc import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict

from weakalign_det.core.errors import ConfigurationError
from weakalign_det.data.schemas import PairedObject, ScenePair

logger = logging.getLogger(__name__)

DEFAULT_MAGNITUDE_BIN = 1.0
DEFAULT_MAGNITUDE_MAX = 20.0
DEFAULT_DIRECTION_BINS = 8


def _translate_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content by (dx, dy) pixels; vacated pixels are zero."""
    out = np.zeros_like(image)
    height, width = image.shape
    if abs(dx) >= width or abs(dy) >= height:
        return out
    src_x = slice(max(0, -dx), width - max(0, dx))
    dst_x = slice(max(0, dx), width - max(0, -dx))
    src_y = slice(max(0, -dy), height - max(0, dy))
    dst_y = slice(max(0, dy), height - max(0, -dy))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out


def shift_image(scene: ScenePair, delta: tuple[int, int]) -> ScenePair:
    """Translate the sensed image and its boxes by ``delta`` pixels; the reference side is untouched."""
    dx, dy = delta
    if int(dx) != dx or int(dy) != dy:
        raise ValueError(f"shift deltas must be integers, got {delta}")
    dx, dy = int(dx), int(dy)
    if dx == 0 and dy == 0:
        return scene

    objects: list[PairedObject] = []
    for obj in scene.objects:
        if obj.sensed_box is None:
            objects.append(obj)
            continue
        moved = obj.sensed_box.translate(dx, dy)
        objects.append(
            obj.model_copy(
                update={
                    "sensed_box": moved,
                    "sensed_truncated": not moved.inside(scene.width, scene.height),
                }
            )
        )
    field = scene.shift_field.translated(dx, dy) if scene.shift_field is not None else None
    return scene.replace(
        sensed_image=_translate_image(scene.sensed_image, dx, dy),
        objects=objects,
        shift_field=field,
    )


def swap_modalities(scene: ScenePair) -> ScenePair:
    """Exchange the reference and sensed roles of an RGB-T scene."""
    if scene.is_rgbd:
        raise ConfigurationError(f"scene {scene.scene_id}: depth cannot act as the reference modality")
    objects = [
        obj.model_copy(
            update={
                "ref_box": obj.sensed_box,
                "sensed_box": obj.ref_box,
                "ref_truncated": obj.sensed_truncated,
                "sensed_truncated": obj.ref_truncated,
            }
        )
        for obj in scene.objects
    ]
    # negation is the exact inverse only for a translation-only field
    field = scene.shift_field.negated() if scene.shift_field is not None else None
    return scene.replace(
        ref_image=scene.sensed_image,
        sensed_image=scene.ref_image,
        objects=objects,
        shift_field=field,
    )


class ShiftHistogram(BaseModel):
    model_config = ConfigDict(frozen=True)

    magnitude_edges: list[float]
    magnitude_counts: list[int]
    direction_edges: list[float]  # degrees in [-180, 180]
    direction_counts: list[int]
    n_paired: int
    n_unpaired: int
    mean_magnitude: float | None = None

    @property
    def mode_bin(self) -> tuple[float, float] | None:
        if self.n_paired == 0:
            return None
        i = int(np.argmax(self.magnitude_counts))
        return (self.magnitude_edges[i], self.magnitude_edges[i + 1])

    def shifted_fraction(self, min_px: float = DEFAULT_MAGNITUDE_BIN) -> float:
        """Fraction of paired objects displaced by at least ``min_px`` (bin-resolution)."""
        if self.n_paired == 0:
            return 0.0
        moved = sum(
            count
            for lo, count in zip(self.magnitude_edges[:-1], self.magnitude_counts, strict=True)
            if lo >= min_px
        )
        return moved / self.n_paired


def object_displacements(scenes: Iterable[ScenePair]) -> tuple[np.ndarray, int]:
    """(N, 2) sensed-minus-reference center offsets of paired objects, plus the unpaired count."""
    offsets: list[tuple[float, float]] = []
    unpaired = 0
    for scene in scenes:
        for obj in scene.objects:
            if not obj.is_paired:
                unpaired += 1
                continue
            assert obj.ref_box is not None and obj.sensed_box is not None
            offsets.append((obj.sensed_box.x - obj.ref_box.x, obj.sensed_box.y - obj.ref_box.y))
    return np.asarray(offsets, dtype=np.float64).reshape(-1, 2), unpaired


def shift_statistics(
    dataset: Iterable[ScenePair],
    bin_px: float = DEFAULT_MAGNITUDE_BIN,
    max_px: float = DEFAULT_MAGNITUDE_MAX,
    direction_bins: int = DEFAULT_DIRECTION_BINS,
) -> ShiftHistogram:
    offsets, unpaired = object_displacements(dataset)
    n_mag = max(1, math.ceil(max_px / bin_px))
    mag_edges = np.arange(n_mag + 1, dtype=np.float64) * bin_px
    dir_edges = np.linspace(-180.0, 180.0, direction_bins + 1)

    magnitudes = np.hypot(offsets[:, 0], offsets[:, 1])
    # overflow goes into the last bin
    clipped = np.minimum(magnitudes, mag_edges[-1] - bin_px / 2.0)
    mag_counts, _ = np.histogram(clipped, bins=mag_edges)
    directions = np.degrees(np.arctan2(offsets[:, 1], offsets[:, 0]))
    dir_counts, _ = np.histogram(directions, bins=dir_edges)

    logger.debug("Shift statistics over %d paired, %d unpaired objects", len(offsets), unpaired)
    return ShiftHistogram(
        magnitude_edges=mag_edges.tolist(),
        magnitude_counts=mag_counts.astype(int).tolist(),
        direction_edges=dir_edges.tolist(),
        direction_counts=dir_counts.astype(int).tolist(),
        n_paired=len(offsets),
        n_unpaired=unpaired,
        mean_magnitude=float(magnitudes.mean()) if len(magnitudes) else None,
    )
