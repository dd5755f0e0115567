"""
Synthetic weakly aligned scene pairs.

Objects are rendered as high-contrast glyphs: filled in the thermal modality,
outlined in the color modality, so a detector has to use both. Sensed boxes are
the reference boxes displaced by a smooth shift field plus per-object noise.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from weakalign_det.core.errors import GenerationError
from weakalign_det.data.schemas import (
    Illumination,
    Occlusion,
    PairedObject,
    ScenePair,
    ShiftFieldConfig,
)
from weakalign_det.data.shift_field import ShiftField
from weakalign_det.geometry.box3d import Box3D, CameraIntrinsics, load_class_dims
from weakalign_det.geometry.boxes import Box2D, iou

logger = logging.getLogger(__name__)

BOX_QUANTUM = 16.0  # boxes are snapped to 1/16 px so integer shifts are exact
MAX_PLACEMENT_ATTEMPTS = 200
EDGE_MARGIN = 2.0

# glyph shape and default height/width aspect per class
CLASS_GLYPHS: dict[str, tuple[str, float]] = {
    "pedestrian": ("ellipse", 2.5),
    "cyclist": ("diamond", 1.5),
    "car": ("rect", 0.5),
    "truck": ("triangle", 0.8),
    "bus": ("cross", 0.6),
    "chair": ("diamond", 1.2),
    "table": ("rect", 0.6),
    "box": ("ellipse", 1.0),
}
_FALLBACK_SHAPES = ("ellipse", "rect", "diamond", "triangle", "cross")


class ModalityPair(str, Enum):
    RGBT = "rgbt"
    RGBD = "rgbd"


class ReferenceModality(str, Enum):
    THERMAL = "thermal"
    COLOR = "color"


class SceneOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    classes: list[str] = Field(default_factory=lambda: ["pedestrian"])
    object_height: tuple[PositiveFloat, PositiveFloat] = (14.0, 30.0)
    modality_pair: ModalityPair = ModalityPair.RGBT
    reference_modality: ReferenceModality | None = None
    night_rate: float = Field(default=0.5, ge=0.0, le=1.0)
    night_contrast: float = Field(default=0.3, ge=0.0, le=1.0)
    partial_occlusion_rate: float = Field(default=0.15, ge=0.0, le=1.0)
    heavy_occlusion_rate: float = Field(default=0.05, ge=0.0, le=1.0)
    clutter_per_scene: int = Field(default=1, ge=0)
    image_noise: float = Field(default=0.03, ge=0.0)
    focal_length: PositiveFloat = 48.0
    depth_range: tuple[PositiveFloat, PositiveFloat] = (2.0, 5.0)
    depth_hole_rate: float = Field(default=0.03, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check(self) -> SceneOptions:
        if not self.classes:
            raise ValueError("classes must not be empty")
        if self.object_height[0] > self.object_height[1]:
            raise ValueError("object_height must be (min, max)")
        if self.depth_range[0] > self.depth_range[1]:
            raise ValueError("depth_range must be (near, far)")
        return self

    @property
    def reference(self) -> ReferenceModality:
        if self.reference_modality is not None:
            return self.reference_modality
        # thermal anchors RGB-T pairs; color anchors RGB-D pairs
        if self.modality_pair is ModalityPair.RGBT:
            return ReferenceModality.THERMAL
        return ReferenceModality.COLOR


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shift: ShiftFieldConfig = Field(default_factory=ShiftFieldConfig)
    scene: SceneOptions = Field(default_factory=SceneOptions)
    canvas: tuple[PositiveInt, PositiveInt] = (64, 64)  # (width, height)
    n_scenes: int = Field(default=100, ge=0)
    objects_per_scene: tuple[int, int] = (1, 4)


def scene_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, index])


def _quantize(value: float) -> float:
    return round(value * BOX_QUANTUM) / BOX_QUANTUM


def _glyph(class_label: str, classes: list[str]) -> tuple[str, float]:
    if class_label in CLASS_GLYPHS:
        return CLASS_GLYPHS[class_label]
    return (_FALLBACK_SHAPES[classes.index(class_label) % len(_FALLBACK_SHAPES)], 1.0)


def sample_shift_field(
    config: ShiftFieldConfig, canvas: tuple[int, int], rng: np.random.Generator
) -> ShiftField:
    width, height = canvas
    if config.direction_deg is None:
        angle = rng.uniform(0.0, 2.0 * math.pi)
    else:
        angle = math.radians(config.direction_deg)
    warp_std = min(
        config.base_shift, 0.25 * config.base_shift * min(width, height) / config.smoothness_scale
    )
    warp = tuple(float(a) for a in rng.normal(0.0, 1.0, size=4) * warp_std)
    return ShiftField(
        width=width,
        height=height,
        base_dx=config.base_shift * math.cos(angle),
        base_dy=config.base_shift * math.sin(angle),
        edge_gain=config.edge_gain,
        warp=warp,  # type: ignore[arg-type]
    )


def glyph_mask(shape: str, box: Box2D, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    u = (xs - box.x) / (box.w / 2.0)
    v = (ys - box.y) / (box.h / 2.0)
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "rect":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "triangle":
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape == "cross":
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        return inside & ((np.abs(u) <= 0.35) | (np.abs(v) <= 0.35))
    raise ValueError(f"unknown glyph shape {shape!r}")


def _occlude(mask: np.ndarray, box: Box2D, occlusion: Occlusion) -> np.ndarray:
    if occlusion is Occlusion.NONE:
        return mask
    fraction = 0.3 if occlusion is Occlusion.PARTIAL else 0.6
    ys = np.arange(mask.shape[0], dtype=np.float64)[:, None] + 0.5
    cut = box.y + box.h / 2.0 - fraction * box.h
    return mask & (ys < cut)


def _outline(mask: np.ndarray) -> np.ndarray:
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    return mask & ~inner


def _background(
    height: int, width: int, level: float, noise: float, rng: np.random.Generator
) -> np.ndarray:
    ys = np.linspace(-0.05, 0.05, height)[:, None]
    image = np.full((height, width), level, dtype=np.float64) + ys
    return image + rng.normal(0.0, noise, size=(height, width))


def _render_intensity(
    height: int,
    width: int,
    glyphs: list[tuple[str, Box2D, Occlusion]],
    filled: bool,
    contrast: float,
    noise: float,
    rng: np.random.Generator,
) -> np.ndarray:
    level = 0.15 if filled else 0.35
    image = _background(height, width, level, noise, rng)
    foreground = level + contrast * (0.9 - level)
    for shape, box, occlusion in glyphs:
        mask = _occlude(glyph_mask(shape, box, height, width), box, occlusion)
        if not filled:
            mask = _outline(mask)
        image[mask] = foreground + rng.normal(0.0, noise, size=int(mask.sum()))
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _place_box(
    existing: list[Box2D],
    box_w: float,
    box_h: float,
    canvas: tuple[int, int],
    rng: np.random.Generator,
) -> Box2D:
    width, height = canvas
    if box_w + 2 * EDGE_MARGIN > width or box_h + 2 * EDGE_MARGIN > height:
        raise GenerationError(
            f"object of size {box_w:.1f}x{box_h:.1f} px does not fit a {width}x{height} canvas"
        )
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        cx = rng.uniform(EDGE_MARGIN + box_w / 2.0, width - EDGE_MARGIN - box_w / 2.0)
        cy = rng.uniform(EDGE_MARGIN + box_h / 2.0, height - EDGE_MARGIN - box_h / 2.0)
        candidate = Box2D(x=_quantize(cx), y=_quantize(cy), w=_quantize(box_w), h=_quantize(box_h))
        if all(iou(candidate, other) <= 0.05 for other in existing):
            return candidate
    raise GenerationError(
        f"could not place {len(existing) + 1} non-overlapping objects on a {width}x{height} canvas"
    )


def _sample_occlusion(options: SceneOptions, rng: np.random.Generator) -> Occlusion:
    r = rng.uniform()
    if r < options.heavy_occlusion_rate:
        return Occlusion.HEAVY
    if r < options.heavy_occlusion_rate + options.partial_occlusion_rate:
        return Occlusion.PARTIAL
    return Occlusion.NONE


def _sample_rgbd_object(
    label: str,
    options: SceneOptions,
    class_dims: dict[str, tuple[float, float, float]],
    canvas: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[float, float, float, tuple[float, float, float], float]:
    """Pick depth, dimensions and yaw; return projected (w_px, h_px) with them."""
    l0, w0, h0 = class_dims[label]
    near, far = options.depth_range
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        scale = rng.uniform(0.85, 1.15, size=3)
        dims = (l0 * scale[0], w0 * scale[1], h0 * scale[2])
        theta = rng.uniform(-math.pi / 4.0, math.pi / 4.0)
        z = rng.uniform(near, far)
        footprint = dims[0] * abs(math.cos(theta)) + dims[1] * abs(math.sin(theta))
        w_px = options.focal_length * footprint / z
        h_px = options.focal_length * dims[2] / z
        if w_px + 2 * EDGE_MARGIN < canvas[0] * 0.8 and h_px + 2 * EDGE_MARGIN < canvas[1] * 0.8:
            return w_px, h_px, z, dims, theta
    raise GenerationError(f"class {label!r} does not fit the canvas at any configured depth")


def generate_scene(
    config: ShiftFieldConfig,
    canvas: tuple[int, int],
    n_objects: int,
    seed: int | np.random.SeedSequence,
    options: SceneOptions | None = None,
    scene_id: str | None = None,
) -> ScenePair:
    if n_objects < 0:
        raise GenerationError(f"n_objects must be >= 0, got {n_objects}")
    width, height = canvas
    if width <= 0 or height <= 0:
        raise GenerationError(f"canvas must be positive, got {canvas}")
    options = options or SceneOptions()
    rng = np.random.default_rng(seed)
    rgbd = options.modality_pair is ModalityPair.RGBD
    class_dims = load_class_dims() if rgbd else {}
    intrinsics = (
        CameraIntrinsics(f=options.focal_length, o_x=width / 2.0, o_y=height / 2.0) if rgbd else None
    )

    field = sample_shift_field(config, canvas, rng)
    night = (not rgbd) and rng.uniform() < options.night_rate

    objects: list[PairedObject] = []
    ref_glyphs: list[tuple[str, Box2D, Occlusion]] = []
    sensed_glyphs: list[tuple[str, Box2D, Occlusion]] = []
    depth_items: list[tuple[float, str, Box2D, Occlusion]] = []
    placed: list[Box2D] = []

    for pair_id in range(n_objects):
        label = options.classes[int(rng.integers(len(options.classes)))]
        shape, aspect = _glyph(label, options.classes)
        box3d_dims = None
        if rgbd:
            if label not in class_dims:
                raise GenerationError(f"class {label!r} has no entry in the class dimension table")
            box_w, box_h, z, dims, theta = _sample_rgbd_object(label, options, class_dims, canvas, rng)
            box3d_dims = (z, dims, theta)
        else:
            box_h = rng.uniform(*options.object_height)
            box_w = box_h / aspect
        ref_box = _place_box(placed, box_w, box_h, canvas, rng)
        placed.append(ref_box)

        fdx, fdy = field.evaluate(ref_box.x, ref_box.y)
        noise = rng.normal(0.0, config.noise_sigma, size=2) if config.noise_sigma > 0 else np.zeros(2)
        sensed_box = Box2D(
            x=_quantize(ref_box.x + fdx + noise[0]),
            y=_quantize(ref_box.y + fdy + noise[1]),
            w=ref_box.w,
            h=ref_box.h,
        )
        occlusion = _sample_occlusion(options, rng)

        keep_ref, keep_sensed = True, True
        if rng.uniform() < config.unpaired_rate:
            if rng.uniform() < 0.5:
                keep_sensed = False
            else:
                keep_ref = False

        box3d = None
        if box3d_dims is not None and keep_ref:
            z, dims, theta = box3d_dims
            box3d = Box3D(
                x_cam=z * (ref_box.x - intrinsics.o_x) / intrinsics.f,  # type: ignore[union-attr]
                y_cam=z * (ref_box.y - intrinsics.o_y) / intrinsics.f,  # type: ignore[union-attr]
                z_cam=z,
                l=dims[0],
                w=dims[1],
                h=dims[2],
                theta=theta,
            )

        if keep_ref:
            ref_glyphs.append((shape, ref_box, occlusion))
        if keep_sensed:
            sensed_glyphs.append((shape, sensed_box, occlusion))
            if box3d_dims is not None:
                depth_items.append((box3d_dims[0], shape, sensed_box, occlusion))

        objects.append(
            PairedObject(
                pair_id=pair_id,
                class_label=label,
                ref_box=ref_box if keep_ref else None,
                sensed_box=sensed_box if keep_sensed else None,
                unpaired=not (keep_ref and keep_sensed),
                occlusion=occlusion,
                ref_truncated=False,
                sensed_truncated=keep_sensed and not sensed_box.inside(width, height),
                box3d=box3d,
            )
        )

    # thermal hot spots that are not objects
    for _ in range(options.clutter_per_scene):
        size = rng.uniform(4.0, 8.0)
        cx, cy = rng.uniform(size, width - size), rng.uniform(size, height - size)
        ref_glyphs.append(("rect", Box2D(x=cx, y=cy, w=size, h=size), Occlusion.NONE))

    reference_is_thermal = options.reference is ReferenceModality.THERMAL
    ref_contrast = 1.0
    sensed_contrast = 1.0
    if night:
        # color fades at night, thermal does not
        if reference_is_thermal:
            sensed_contrast = options.night_contrast
        else:
            ref_contrast = options.night_contrast

    ref_image = _render_intensity(
        height, width, ref_glyphs, reference_is_thermal or rgbd, ref_contrast, options.image_noise, rng
    )
    depth_scale = None
    if rgbd:
        sensed_image, depth_scale = _render_depth(height, width, depth_items, options, rng)
    else:
        sensed_image = _render_intensity(
            height,
            width,
            sensed_glyphs,
            not reference_is_thermal,
            sensed_contrast,
            options.image_noise,
            rng,
        )

    return ScenePair(
        scene_id=scene_id or f"scene_{int(rng.integers(1 << 30)):09d}",
        ref_image=ref_image,
        sensed_image=sensed_image,
        objects=objects,
        extent=(width, height),
        shift_field=field,
        intrinsics=intrinsics,
        illumination=Illumination.NIGHT if night else Illumination.DAY,
        depth_scale=depth_scale,
    )


def _render_depth(
    height: int,
    width: int,
    items: list[tuple[float, str, Box2D, Occlusion]],
    options: SceneOptions,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    far = options.depth_range[1] * 1.2
    depth_scale = far * 1.25
    ys = np.linspace(0.0, 0.1 * far, height)[:, None]
    depth = np.full((height, width), far, dtype=np.float64) - ys
    for z, shape, box, occlusion in sorted(items, key=lambda item: -item[0]):
        mask = _occlude(glyph_mask(shape, box, height, width), box, occlusion)
        depth[mask] = z + rng.normal(0.0, 0.01, size=int(mask.sum()))
    holes = rng.uniform(size=depth.shape) < options.depth_hole_rate
    depth[holes] = 0.0
    return (depth / depth_scale).astype(np.float32), depth_scale


def _generate_indexed(args: tuple[GeneratorConfig, int, int]) -> ScenePair:
    config, master_seed, index = args
    seq = scene_seed(master_seed, index)
    count_rng = np.random.default_rng(seq.spawn(1)[0])
    lo, hi = config.objects_per_scene
    n_objects = int(count_rng.integers(lo, hi + 1))
    return generate_scene(
        config.shift,
        config.canvas,
        n_objects,
        seq,
        options=config.scene,
        scene_id=f"scene_{index:05d}",
    )


def generate_dataset(config: GeneratorConfig, master_seed: int, workers: int = 1) -> list[ScenePair]:
    """Generate ``config.n_scenes`` scenes; scene i depends only on (master_seed, i)."""
    jobs = [(config, master_seed, i) for i in range(config.n_scenes)]
    logger.info("Generating %d scenes with %d worker(s)", len(jobs), workers)
    if workers <= 1:
        return [_generate_indexed(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate_indexed, jobs, chunksize=8))
