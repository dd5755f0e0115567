"""Two independent convolutional streams, one per modality."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass
class FeatureMap:
    """``values`` is (C, H, W) for one image or (N, C, H, W) for a batch."""

    values: Tensor
    stride: int

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def spatial_size(self) -> tuple[int, int]:
        return (int(self.values.shape[-2]), int(self.values.shape[-1]))

    def batched(self) -> Tensor:
        return self.values if self.values.dim() == 4 else self.values.unsqueeze(0)


def feature_size(image_size: tuple[int, int], stride: int) -> tuple[int, int]:
    """Spatial size ``ceil(image / stride)`` of a map for a (height, width) image."""
    return (math.ceil(image_size[0] / stride), math.ceil(image_size[1] / stride))


class StreamBackbone(nn.Module):
    """Conv3x3-ReLU blocks; the first ``downsample_blocks`` halve the resolution."""

    def __init__(self, in_channels: int, channels: Sequence[int], downsample_blocks: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for i, out in enumerate(channels):
            stride = 2 if i < downsample_blocks else 1
            layers += [
                nn.Conv2d(prev, out, kernel_size=3, stride=stride, padding=1),
                nn.ReLU(inplace=True),
            ]
            prev = out
        self.body = nn.Sequential(*layers)
        self.out_channels = prev
        self.stride = 2**downsample_blocks
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


class TwoStreamBackbone(nn.Module):
    def __init__(
        self,
        in_channels: int,
        channels: Sequence[int],
        downsample_blocks: int,
        shared_init: bool = False,
    ):
        super().__init__()
        self.ref = StreamBackbone(in_channels, channels, downsample_blocks)
        self.sensed = StreamBackbone(in_channels, channels, downsample_blocks)
        if shared_init:
            # same starting point, weights still trained independently
            self.sensed.load_state_dict(self.ref.state_dict())
        self.out_channels = self.ref.out_channels
        self.stride = self.ref.stride

    def forward(self, ref: Tensor, sensed: Tensor) -> tuple[Tensor, Tensor]:
        if ref.shape != sensed.shape:
            raise ValueError(
                f"stream inputs differ in shape: {tuple(ref.shape)} vs {tuple(sensed.shape)}"
            )
        return self.ref(ref), self.sensed(sensed)


def fuse_maps(f_ref: Tensor, f_sensed: Tensor) -> Tensor:
    """Element-wise aggregation feeding the proposal head."""
    if f_ref.shape != f_sensed.shape:
        raise ValueError(
            f"feature maps differ in shape: {tuple(f_ref.shape)} vs {tuple(f_sensed.shape)}"
        )
    return torch.add(f_ref, f_sensed)
