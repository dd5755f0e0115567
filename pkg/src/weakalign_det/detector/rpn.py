"""Region proposal network over the aggregated two-stream feature map."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torchvision.ops import box_iou, clip_boxes_to_image, nms, remove_small_boxes

from weakalign_det.detector.backbone import fuse_maps
from weakalign_det.geometry.box_coder import decode_deltas, encode_deltas
from weakalign_det.geometry.boxes import cxcywh_to_xyxy, xyxy_to_cxcywh

logger = logging.getLogger(__name__)

RPN_DELTA_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
MIN_PROPOSAL_SIZE = 1.0


@dataclass(frozen=True)
class RPNSettings:
    pre_nms_top_n: int = 300
    post_nms_top_n_train: int = 128
    post_nms_top_n_test: int = 100
    nms_thresh: float = 0.7
    fg_iou: float = 0.7
    bg_iou: float = 0.3
    batch_size_per_image: int = 64
    positive_fraction: float = 0.5


class RPNHead(nn.Module):
    def __init__(self, in_channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, kernel_size=3, padding=1)
        self.cls_logits = nn.Conv2d(in_channels, num_anchors, kernel_size=1)
        self.bbox_pred = nn.Conv2d(in_channels, num_anchors * 4, kernel_size=1)
        for layer in (self.conv, self.cls_logits, self.bbox_pred):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness logits (N, H*W*A) and deltas (N, H*W*A, 4).

        Anchor order follows ``generate_anchors``.
        """
        t = F.relu(self.conv(x))
        logits = self.cls_logits(t)
        deltas = self.bbox_pred(t)
        n, a, h, w = logits.shape
        logits = logits.permute(0, 2, 3, 1).reshape(n, h * w * a)
        deltas = deltas.view(n, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, 4)
        return logits, deltas


class RegionProposalNetwork(nn.Module):
    def __init__(self, in_channels: int, num_anchors: int, settings: RPNSettings | None = None):
        super().__init__()
        self.head = RPNHead(in_channels, num_anchors)
        self.settings = settings or RPNSettings()

    def forward(self, f_ref: Tensor, f_sensed: Tensor) -> tuple[Tensor, Tensor]:
        return self.head(fuse_maps(f_ref, f_sensed))

    def propose(
        self,
        logits: Tensor,
        deltas: Tensor,
        anchors: Tensor,
        image_size: tuple[int, int],
        top_k: int | None = None,
    ) -> list[tuple[Tensor, Tensor]]:
        """Per image: (boxes (K, 4) center form, objectness (K,) in [0, 1]) sorted by objectness."""
        s = self.settings
        if top_k is None:
            top_k = s.post_nms_top_n_train if self.training else s.post_nms_top_n_test
        results = []
        for img_logits, img_deltas in zip(logits.detach(), deltas.detach(), strict=True):
            results.append(
                select_proposals(
                    img_logits, img_deltas, anchors, image_size, s.pre_nms_top_n, top_k, s.nms_thresh
                )
            )
        return results


def select_proposals(
    logits: Tensor,
    deltas: Tensor,
    anchors: Tensor,
    image_size: tuple[int, int],
    pre_nms_top_n: int,
    top_k: int,
    nms_thresh: float,
) -> tuple[Tensor, Tensor]:
    if top_k <= 0:
        return logits.new_zeros((0, 4)), logits.new_zeros((0,))
    n_pre = min(pre_nms_top_n, logits.shape[0])
    # stable sort keeps ties in anchor order
    order = torch.sort(logits, descending=True, stable=True).indices[:n_pre]
    boxes = decode_deltas(deltas[order], anchors[order], RPN_DELTA_WEIGHTS)
    boxes = clip_boxes_to_image(cxcywh_to_xyxy(boxes), image_size)
    scores = torch.sigmoid(logits[order])
    keep = remove_small_boxes(boxes, MIN_PROPOSAL_SIZE)
    boxes, scores = boxes[keep], scores[keep]
    keep = nms(boxes, scores, nms_thresh)[:top_k]
    return xyxy_to_cxcywh(boxes[keep]), scores[keep]


def _sample_balanced(
    labels: Tensor, batch_size: int, positive_fraction: float, generator: torch.Generator | None
) -> tuple[Tensor, Tensor]:
    positive = torch.where(labels == 1)[0]
    negative = torch.where(labels == 0)[0]
    num_pos = min(positive.numel(), int(batch_size * positive_fraction))
    num_neg = min(negative.numel(), batch_size - num_pos)
    pos = positive[torch.randperm(positive.numel(), generator=generator)[:num_pos]]
    neg = negative[torch.randperm(negative.numel(), generator=generator)[:num_neg]]
    return pos, neg


def rpn_loss(
    logits: Tensor,
    deltas: Tensor,
    anchors: Tensor,
    gt_boxes: list[Tensor],
    settings: RPNSettings,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Binary objectness cross-entropy plus smooth-L1 deltas over sampled anchors."""
    anchors_xyxy = cxcywh_to_xyxy(anchors)
    cls_losses, reg_losses = [], []
    for img_logits, img_deltas, gt in zip(logits, deltas, gt_boxes, strict=True):
        labels = torch.zeros(anchors.shape[0], dtype=torch.long, device=anchors.device)
        matched = torch.zeros(anchors.shape[0], dtype=torch.long, device=anchors.device)
        if gt.numel() > 0:
            ious = box_iou(anchors_xyxy, cxcywh_to_xyxy(gt))  # (A, M)
            best_iou, matched = ious.max(dim=1)
            labels = torch.full_like(matched, -1)
            labels[best_iou < settings.bg_iou] = 0
            labels[best_iou >= settings.fg_iou] = 1
            # every GT keeps its best anchors
            best_per_gt = ious.max(dim=0).values
            for j in range(gt.shape[0]):
                if best_per_gt[j] > 0:
                    hits = torch.where(ious[:, j] == best_per_gt[j])[0]
                    labels[hits] = 1
                    matched[hits] = j
        pos, neg = _sample_balanced(
            labels, settings.batch_size_per_image, settings.positive_fraction, generator
        )
        sampled = torch.cat((pos, neg))
        targets = (labels[sampled] == 1).to(img_logits.dtype)
        cls_losses.append(F.binary_cross_entropy_with_logits(img_logits[sampled], targets))
        if pos.numel() > 0:
            reg_target = encode_deltas(gt[matched[pos]], anchors[pos], RPN_DELTA_WEIGHTS)
            reg = F.smooth_l1_loss(img_deltas[pos], reg_target, beta=1.0 / 9, reduction="sum")
            reg_losses.append(reg / max(1, sampled.numel()))
        else:
            reg_losses.append(img_deltas.sum() * 0.0)
    return torch.stack(cls_losses).mean() + torch.stack(reg_losses).mean()
