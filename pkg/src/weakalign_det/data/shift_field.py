"""
Smooth cross-modal displacement field of a synthetic scene pair.

With normalized coordinates u = (x - W/2) / (W/2), v = (y - H/2) / (H/2):

    radial = 1 + (edge_gain - 1) * (u^2 + v^2) / 2
    dx = base_dx * radial + a_xu * u + a_xv * v + offset_dx
    dy = base_dy * radial + a_yu * u + a_yv * v + offset_dy

so displacement grows toward the image border when edge_gain > 1.
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, FiniteFloat, PositiveFloat, PositiveInt


class ShiftField(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: PositiveInt
    height: PositiveInt
    base_dx: FiniteFloat = 0.0
    base_dy: FiniteFloat = 0.0
    edge_gain: PositiveFloat = 1.0
    warp: tuple[FiniteFloat, FiniteFloat, FiniteFloat, FiniteFloat] = (0.0, 0.0, 0.0, 0.0)
    offset_dx: FiniteFloat = 0.0
    offset_dy: FiniteFloat = 0.0

    def evaluate(self, x: float | np.ndarray, y: float | np.ndarray) -> tuple:
        u = (np.asarray(x, dtype=np.float64) - self.width / 2.0) / (self.width / 2.0)
        v = (np.asarray(y, dtype=np.float64) - self.height / 2.0) / (self.height / 2.0)
        radial = 1.0 + (self.edge_gain - 1.0) * (u * u + v * v) / 2.0
        a_xu, a_xv, a_yu, a_yv = self.warp
        dx = self.base_dx * radial + a_xu * u + a_xv * v + self.offset_dx
        dy = self.base_dy * radial + a_yu * u + a_yv * v + self.offset_dy
        if np.ndim(dx) == 0:
            return float(dx), float(dy)
        return dx, dy

    def translated(self, dx: float, dy: float) -> ShiftField:
        return self.model_copy(
            update={"offset_dx": self.offset_dx + dx, "offset_dy": self.offset_dy + dy}
        )

    def negated(self) -> ShiftField:
        return self.model_copy(
            update={
                "base_dx": -self.base_dx,
                "base_dy": -self.base_dy,
                "warp": tuple(-a for a in self.warp),
                "offset_dx": -self.offset_dx,
                "offset_dy": -self.offset_dy,
            }
        )

    def mirrored(self) -> ShiftField:
        """Field of the horizontally flipped scene: d'(x, y) = (-dx, dy)(W - x, y)."""
        a_xu, a_xv, a_yu, a_yv = self.warp
        return self.model_copy(
            update={
                "base_dx": -self.base_dx,
                "warp": (a_xu, -a_xv, -a_yu, a_yv),
                "offset_dx": -self.offset_dx,
            }
        )
