"""The two-stream detector: backbone, fused proposals, alignment, fusion and head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import torch
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator
from torch import Tensor, nn

from weakalign_det.alignment.rfa import AlignmentOutputs, Combiner, RegionFeatureAlignment
from weakalign_det.core.errors import ConfigurationError
from weakalign_det.detector.anchors import DEFAULT_ANCHOR_SIZES, DEFAULT_ASPECT_RATIOS, generate_anchors
from weakalign_det.detector.backbone import TwoStreamBackbone, feature_size
from weakalign_det.detector.heads import DetectionHead, HeadOutputs
from weakalign_det.detector.rpn import RegionProposalNetwork, RPNSettings
from weakalign_det.fusion.caf import ConfidenceAwareFusion, FusionOutputs
from weakalign_det.geometry.box_coder import BBOX_REG_WEIGHTS
from weakalign_det.geometry.boxes import DEFAULT_CONTEXT_FACTOR


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: tuple[PositiveInt, PositiveInt] = (64, 64)  # (height, width)
    in_channels: PositiveInt = 1
    channels: tuple[PositiveInt, ...] = (16, 32, 32)
    downsample_blocks: int = Field(default=2, ge=0)
    shared_init: bool = False
    class_names: tuple[str, ...] = ("pedestrian",)
    anchor_sizes: tuple[float, ...] = DEFAULT_ANCHOR_SIZES
    aspect_ratios: tuple[float, ...] = DEFAULT_ASPECT_RATIOS
    rpn_pre_nms_top_n: PositiveInt = 300
    rpn_post_nms_top_n_train: PositiveInt = 128
    rpn_post_nms_top_n_test: PositiveInt = 100
    rpn_nms_thresh: float = Field(default=0.7, gt=0.0, le=1.0)
    pool_size: tuple[PositiveInt, PositiveInt] = (7, 7)
    sampling_ratio: PositiveInt = 2
    context_factor: float = Field(default=DEFAULT_CONTEXT_FACTOR, ge=1.0)
    combiner: Combiner = Combiner.SUM
    fc_dim: PositiveInt = 128
    box_reg_weights: tuple[float, float, float, float] = BBOX_REG_WEIGHTS
    nms_thresh: float = Field(default=0.5, gt=0.0, le=1.0)
    detections_per_image: PositiveInt = 100
    use_rfa: bool = True
    use_caf: bool = True
    use_3d: bool = False

    @model_validator(mode="after")
    def _check(self) -> ModelConfig:
        if self.downsample_blocks > len(self.channels):
            raise ValueError("downsample_blocks cannot exceed the number of conv blocks")
        if not self.class_names:
            raise ValueError("class_names must not be empty")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def stride(self) -> int:
        return 2**self.downsample_blocks

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes) * len(self.aspect_ratios)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class RoIOutputs:
    alignment: AlignmentOutputs
    fusion: FusionOutputs
    head: HeadOutputs


class TwoStreamDetector(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.backbone = TwoStreamBackbone(c.in_channels, c.channels, c.downsample_blocks, c.shared_init)
        self.rpn = RegionProposalNetwork(
            self.backbone.out_channels,
            c.num_anchors,
            RPNSettings(
                pre_nms_top_n=c.rpn_pre_nms_top_n,
                post_nms_top_n_train=c.rpn_post_nms_top_n_train,
                post_nms_top_n_test=c.rpn_post_nms_top_n_test,
                nms_thresh=c.rpn_nms_thresh,
            ),
        )
        self.rfa = RegionFeatureAlignment(
            self.backbone.out_channels,
            stride=c.stride,
            image_size=c.image_size,
            pool_size=c.pool_size,
            sampling_ratio=c.sampling_ratio,
            context_factor=c.context_factor,
            combiner=c.combiner,
            fc_dim=c.fc_dim,
            enabled=c.use_rfa,
        )
        self.caf = ConfidenceAwareFusion(
            self.backbone.out_channels, c.pool_size, c.num_classes, c.use_caf
        )
        self.head = DetectionHead(
            self.backbone.out_channels, c.pool_size, c.num_classes, c.fc_dim, with_3d=c.use_3d
        )
        self.register_buffer(
            "anchors",
            generate_anchors(
                feature_size(c.image_size, c.stride), c.stride, c.anchor_sizes, c.aspect_ratios
            ),
            persistent=False,
        )
        self.register_buffer("trained", torch.tensor(False))

    @property
    def is_trained(self) -> bool:
        return bool(self.trained)

    def mark_trained(self) -> None:
        self.trained.fill_(True)

    def check_input(self, images: Tensor) -> None:
        expected = (self.config.in_channels, *self.config.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ConfigurationError(
                f"input of shape {tuple(images.shape)} does not match configured (N, {expected[0]}, "
                f"{expected[1]}, {expected[2]})"
            )

    def features(self, ref: Tensor, sensed: Tensor) -> tuple[Tensor, Tensor]:
        self.check_input(ref)
        self.check_input(sensed)
        return self.backbone(ref, sensed)

    def roi_forward(
        self,
        f_ref: Tensor,
        f_sensed: Tensor,
        rois: Tensor,
        batch_index: Tensor,
        sensed_rois: Tensor | None = None,
        sensed_multiplier: Tensor | float | None = None,
    ) -> RoIOutputs:
        alignment = self.rfa(f_ref, f_sensed, rois, batch_index, sensed_rois)
        fusion = self.caf(alignment.rf_ref, alignment.rf_sensed, sensed_multiplier)
        return RoIOutputs(alignment=alignment, fusion=fusion, head=self.head(fusion.fused))
