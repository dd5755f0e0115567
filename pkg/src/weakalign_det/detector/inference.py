"""Single-scene entry points of the detector pipeline."""
from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor
from torchvision.ops import batched_nms, clip_boxes_to_image

from weakalign_det.core.errors import ConfigurationError, DepthInitError
from weakalign_det.data.dataset import scene_images
from weakalign_det.data.schemas import ScenePair
from weakalign_det.detector.backbone import FeatureMap
from weakalign_det.detector.model import TwoStreamDetector
from weakalign_det.detector.roi_align import (
    DEFAULT_POOL_SIZE,
    DEFAULT_SAMPLING_RATIO,
    outside_feature_extent,
    roi_align,
    single_batch_index,
)
from weakalign_det.detector.rpn import RegionProposalNetwork
from weakalign_det.geometry.box3d import Box3D, Box3DTargets, decode_3d, init_box3d, load_class_dims
from weakalign_det.geometry.box_coder import decode_deltas
from weakalign_det.geometry.boxes import (
    Box2D,
    ShiftTarget,
    boxes_to_tensor,
    cxcywh_to_xyxy,
    tensor_to_boxes,
    xyxy_to_cxcywh,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6


class Proposal(BaseModel):
    model_config = ConfigDict(frozen=True)

    roi: Box2D
    objectness: float = Field(ge=0.0, le=1.0)


class DetectionResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: Box2D
    class_label: str
    confidence: float = Field(ge=0.0, le=1.0)
    box3d: Box3D | None = None
    shift: ShiftTarget | None = None  # predicted shift of the originating RoI
    sensed_box: Box2D | None = None  # the RoI moved into the sensed image


def extract_features(scene: ScenePair, model: TwoStreamDetector) -> tuple[FeatureMap, FeatureMap]:
    ref, sensed = scene_images(scene)
    with torch.no_grad():
        f_ref, f_sensed = model.features(ref.unsqueeze(0), sensed.unsqueeze(0))
    stride = model.config.stride
    return FeatureMap(f_ref[0], stride), FeatureMap(f_sensed[0], stride)


def propose_regions(
    f_ref: FeatureMap,
    f_sensed: FeatureMap,
    rpn: RegionProposalNetwork,
    anchors: Tensor,
    top_k: int,
    image_size: tuple[int, int] | None = None,
) -> list[Proposal]:
    """Up to ``top_k`` proposals sorted by objectness, clipped to the (height, width) image."""
    if top_k <= 0:
        return []
    if image_size is None:
        h, w = f_ref.spatial_size
        image_size = (h * f_ref.stride, w * f_ref.stride)
    with torch.no_grad():
        logits, deltas = rpn(f_ref.batched(), f_sensed.batched())
        boxes, scores = rpn.propose(logits, deltas, anchors, image_size, top_k)[0]
    return [
        Proposal(roi=box, objectness=float(score))
        for box, score in zip(tensor_to_boxes(boxes), scores.tolist(), strict=True)
    ]


def pool_region(
    f: FeatureMap,
    roi: Box2D,
    out_size: tuple[int, int] = DEFAULT_POOL_SIZE,
    sampling_ratio: int = DEFAULT_SAMPLING_RATIO,
) -> tuple[Tensor, bool]:
    """Region feature (C, H, W) and whether ``roi`` missed the map entirely (then all zeros)."""
    features = f.batched()
    rois = boxes_to_tensor([roi], dtype=features.dtype)
    outside = bool(outside_feature_extent(rois, f.spatial_size, f.stride)[0])
    if outside:
        logger.warning("RoI (%.1f, %.1f, %.1f, %.1f) lies outside the feature map", *roi.as_tuple())
    index = single_batch_index(1, features.device)
    pooled = roi_align(features, rois, index, f.stride, out_size, sampling_ratio)
    return pooled[0], outside


def crop_depth(scene: ScenePair, box: Box2D) -> np.ndarray:
    """Depth values (meters) inside ``box`` of the sensed image; empty when it misses the image."""
    depth = scene.depth_map()
    x1, y1, x2, y2 = box.to_corners()
    c1, c2 = max(0, int(np.floor(x1))), min(scene.sensed_image.shape[1], int(np.ceil(x2)))
    r1, r2 = max(0, int(np.floor(y1))), min(scene.sensed_image.shape[0], int(np.ceil(y2)))
    if c2 <= c1 or r2 <= r1:
        return np.zeros(0)
    return depth[r1:r2, c1:c2]


def _check_model(model: TwoStreamDetector, scene: ScenePair) -> None:
    if not model.is_trained:
        raise ConfigurationError("model has not been trained")
    expected = model.config.image_size
    for name in ("ref_image", "sensed_image"):
        shape = getattr(scene, name).shape
        if tuple(shape) != tuple(expected):
            raise ConfigurationError(
                f"scene {scene.scene_id}: {name} of shape {shape} does not match model input {expected}"
            )


def detect(
    scene: ScenePair,
    model: TwoStreamDetector,
    threshold: float = DEFAULT_THRESHOLD,
    class_dims: dict[str, tuple[float, float, float]] | None = None,
) -> list[DetectionResult]:
    return detect_batch([scene], model, threshold, class_dims)[0]


def detect_batch(
    scenes: Sequence[ScenePair],
    model: TwoStreamDetector,
    threshold: float = DEFAULT_THRESHOLD,
    class_dims: dict[str, tuple[float, float, float]] | None = None,
) -> list[list[DetectionResult]]:
    """Full pipeline per scene; returns detections with confidence > ``threshold`` after NMS."""
    if not scenes:
        return []
    for scene in scenes:
        _check_model(model, scene)
    cfg = model.config
    if cfg.use_3d and class_dims is None:
        class_dims = load_class_dims()

    model.eval()
    images = [scene_images(s) for s in scenes]
    ref = torch.stack([r for r, _ in images])
    sensed = torch.stack([s for _, s in images])
    with torch.no_grad():
        f_ref, f_sensed = model.features(ref, sensed)
        logits, deltas = model.rpn(f_ref, f_sensed)
        proposals = model.rpn.propose(
            logits, deltas, model.anchors, cfg.image_size, cfg.rpn_post_nms_top_n_test
        )
        rois = torch.cat([boxes for boxes, _ in proposals])
        batch_index = torch.cat(
            [
                torch.full((boxes.shape[0],), i, dtype=torch.long)
                for i, (boxes, _) in enumerate(proposals)
            ]
        )
        out = model.roi_forward(f_ref, f_sensed, rois, batch_index)

    probs = torch.softmax(out.head.cls_logits, dim=-1)
    boxes = decode_deltas(out.head.box_deltas, rois, cfg.box_reg_weights)
    boxes_xyxy = clip_boxes_to_image(cxcywh_to_xyxy(boxes), cfg.image_size)

    results: list[list[DetectionResult]] = []
    dropped_3d = 0
    for i, scene in enumerate(scenes):
        idx = torch.where(batch_index == i)[0]
        n_roi, n_cls = idx.numel(), cfg.num_classes
        if n_roi == 0:
            results.append([])
            continue
        # one candidate per (RoI, foreground class)
        cand_roi = idx.repeat_interleave(n_cls)
        cand_cls = torch.arange(1, n_cls + 1).repeat(n_roi)
        cand_score = probs[cand_roi, cand_cls]
        cand_box = boxes_xyxy[cand_roi]
        wh = cand_box[:, 2:] - cand_box[:, :2]
        valid = (wh > 0).all(dim=1)
        cand_roi, cand_cls, cand_score, cand_box = (
            cand_roi[valid],
            cand_cls[valid],
            cand_score[valid],
            cand_box[valid],
        )
        keep = batched_nms(cand_box, cand_score, cand_cls, cfg.nms_thresh)[: cfg.detections_per_image]
        keep = keep[cand_score[keep] > threshold]

        detections = []
        for k in keep.tolist():
            r = int(cand_roi[k])
            label = cfg.class_names[int(cand_cls[k]) - 1]
            box = tensor_to_boxes(xyxy_to_cxcywh(cand_box[k : k + 1]))[0]
            sensed_box = tensor_to_boxes(out.alignment.aligned_rois[r : r + 1])[0]
            box3d = None
            if out.head.box3d is not None and scene.is_rgbd and scene.intrinsics is not None:
                try:
                    depth = crop_depth(scene, sensed_box)
                    init = init_box3d(box, depth, scene.intrinsics, class_dims or {}, label)
                    box3d = decode_3d(init, Box3DTargets.from_sequence(out.head.box3d[r]))
                except DepthInitError:
                    dropped_3d += 1
            detections.append(
                DetectionResult(
                    box=box,
                    class_label=label,
                    confidence=min(1.0, max(0.0, float(cand_score[k]))),
                    box3d=box3d,
                    shift=ShiftTarget(
                        t_x=float(out.alignment.shift[r, 0]), t_y=float(out.alignment.shift[r, 1])
                    ),
                    sensed_box=sensed_box,
                )
            )
        results.append(detections)
    if dropped_3d:
        logger.warning("Dropped %d 3D initializations without valid depth", dropped_3d)
    return results
