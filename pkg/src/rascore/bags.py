"""Patch bags: ordered patch sets with provenance, shared by both sampling schemes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import Rect


@dataclass(frozen=True)
class PatchRecord:
    """One patch plus where it came from."""

    pixels: np.ndarray
    rect: Rect
    tag: str  # argmax class name (scheme 1) or joint name (scheme 2)
    tile_index: Optional[int] = None
    p_abnormal: Optional[float] = None
    padded: bool = False  # crop ran past the image border


@dataclass(frozen=True)
class PatchBag:
    source_id: str
    scheme: int
    patches: tuple[PatchRecord, ...]
    truncated: bool = False  # fewer source tiles than K, bag filled cyclically
    score: Optional[float] = None

    def __post_init__(self):
        if self.scheme not in (1, 2):
            raise ValueError(f"unknown scheme {self.scheme}")
        if not self.patches:
            raise ValueError("empty patch bag")

    def __len__(self) -> int:
        return len(self.patches)

    def pixel_stack(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.patches])

    def provenance(self) -> list[dict]:
        return [
            {
                "tile_index": p.tile_index,
                "rect": [p.rect.x, p.rect.y, p.rect.w, p.rect.h],
                "tag": p.tag,
                "p_abnormal": p.p_abnormal,
            }
            for p in self.patches
        ]


@dataclass(frozen=True)
class FeatureBag:
    """K x d patch embeddings with the bag-level score label."""

    source_id: str
    features: np.ndarray
    rects: tuple[Rect, ...] = field(default_factory=tuple)
    score: Optional[float] = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be K x d")
        if self.rects and len(self.rects) != self.features.shape[0]:
            raise ValueError("rect count must match feature rows")
