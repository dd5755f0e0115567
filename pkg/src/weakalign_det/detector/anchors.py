"""Dense anchor grid over a feature map."""
from __future__ import annotations

import math
from collections.abc import Sequence

import torch
from torch import Tensor

DEFAULT_ANCHOR_SIZES = (12.0, 20.0, 32.0)
DEFAULT_ASPECT_RATIOS = (1.0, 2.0, 3.0)  # height / width


def cell_anchors(sizes: Sequence[float], aspect_ratios: Sequence[float]) -> Tensor:
    """(A, 2) anchor (w, h) pairs; each has area ``size**2``."""
    wh = []
    for size in sizes:
        for ratio in aspect_ratios:
            wh.append((size / math.sqrt(ratio), size * math.sqrt(ratio)))
    return torch.tensor(wh, dtype=torch.float32)


def generate_anchors(
    feature_size: tuple[int, int],
    stride: int,
    sizes: Sequence[float] = DEFAULT_ANCHOR_SIZES,
    aspect_ratios: Sequence[float] = DEFAULT_ASPECT_RATIOS,
) -> Tensor:
    """Center-form anchors, shape (H * W * A, 4), ordered cell-major then anchor."""
    height, width = feature_size
    ys = (torch.arange(height, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(width, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack((cx.reshape(-1), cy.reshape(-1)), dim=-1)  # (H*W, 2)
    wh = cell_anchors(sizes, aspect_ratios)  # (A, 2)
    n_cells, n_anchors = centers.shape[0], wh.shape[0]
    centers = centers[:, None, :].expand(n_cells, n_anchors, 2)
    wh = wh[None, :, :].expand(n_cells, n_anchors, 2)
    return torch.cat((centers, wh), dim=-1).reshape(-1, 4)
