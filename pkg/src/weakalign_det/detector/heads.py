"""Per-RoI detection head on the fused region feature."""
from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor, nn

BOX3D_ENTRIES = 7


@dataclass
class HeadOutputs:
    cls_logits: Tensor  # (K, num_classes + 1), column 0 is background
    box_deltas: Tensor  # (K, 4), class agnostic
    box3d: Tensor | None  # (K, 7) offsets from the initialized 3D box


class DetectionHead(nn.Module):
    def __init__(
        self,
        in_channels: int,
        pool_size: tuple[int, int],
        num_classes: int,
        fc_dim: int = 128,
        with_3d: bool = False,
    ):
        super().__init__()
        in_features = in_channels * pool_size[0] * pool_size[1]
        self.fc = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_features, fc_dim),
            nn.ReLU(inplace=True),
            nn.Linear(fc_dim, fc_dim),
            nn.ReLU(inplace=True),
        )
        self.cls_score = nn.Linear(fc_dim, num_classes + 1)
        self.bbox_pred = nn.Linear(fc_dim, 4)
        self.box3d_pred = nn.Linear(fc_dim, BOX3D_ENTRIES) if with_3d else None

        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)
        if self.box3d_pred is not None:
            nn.init.normal_(self.box3d_pred.weight, std=0.001)
            nn.init.zeros_(self.box3d_pred.bias)

    def forward(self, fused: Tensor) -> HeadOutputs:
        x = self.fc(fused)
        return HeadOutputs(
            cls_logits=self.cls_score(x),
            box_deltas=self.bbox_pred(x),
            box3d=self.box3d_pred(x) if self.box3d_pred is not None else None,
        )
