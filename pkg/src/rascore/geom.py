"""Shared pixel-rectangle type used for tile and patch provenance."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle: origin (x, y), size (w, h). Half-open on both axes."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative rect size: {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def clipped(self, width: int, height: int) -> "Rect":
        x0 = max(self.x, 0)
        y0 = max(self.y, 0)
        x1 = min(self.x + self.w, width)
        y1 = min(self.y + self.h, height)
        return Rect(x0, y0, max(x1 - x0, 0), max(y1 - y0, 0))
