"""Scheme 1: grid tiling, weak labels, background labeling, abnormality-ranked sampling."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .bags import PatchBag, PatchRecord
from .data import Radiograph
from .foreground import ForegroundMask, foreground_fraction, is_background
from .geom import Rect

NORMAL_SCORE_MAX = 5.0  # score < 5 is weakly normal
ABNORMAL_SCORE_MIN = 70.0  # score >= 70 is weakly abnormal

CLASS_NORMAL, CLASS_ABNORMAL, CLASS_BACKGROUND = 0, 1, 2
CLASS_NAMES = ("normal", "abnormal", "background")


class WeakLabel(enum.Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"
    BACKGROUND = "background"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class Tile:
    index: int  # row-major position in the tile grid
    rect: Rect
    pixels: np.ndarray
    class_probs: Optional[tuple[float, float, float]] = None  # (normal, abnormal, background)
    background: bool = False

    def __post_init__(self):
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError("tiles are square")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, dtype=np.float64)
            if p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
                raise ValueError(f"tile {self.index}: class probs must be a distribution, got {p}")

    @property
    def p_abnormal(self) -> float:
        if self.class_probs is None:
            raise ValueError(f"tile {self.index} has no class probabilities")
        return self.class_probs[CLASS_ABNORMAL]

    @property
    def argmax_class(self) -> int:
        if self.class_probs is None:
            raise ValueError(f"tile {self.index} has no class probabilities")
        return int(np.argmax(self.class_probs))


def tile_side(height: int, width: int) -> int:
    return max(height, width) // 10


def partition_tiles(img: Radiograph) -> list[Tile]:
    """Cut the image into non-overlapping squares of side floor(max(H,W)/10).

    The image is edge-padded (border replicate) up to the next multiple of the
    side in each dimension so the grid covers it exactly; tiles come back in
    row-major order.
    """
    h, w = img.height, img.width
    side = tile_side(h, w)
    if side < 1 or min(h, w) < side:
        raise ValueError(f"image {img.id!r} ({h}x{w}) smaller than one tile (side {side})")
    pad_h = (-h) % side
    pad_w = (-w) % side
    padded = np.pad(img.pixels, ((0, pad_h), (0, pad_w)), mode="edge")
    rows, cols = padded.shape[0] // side, padded.shape[1] // side
    tiles = []
    for r in range(rows):
        for c in range(cols):
            rect = Rect(c * side, r * side, side, side)
            pix = padded[rect.y : rect.y + side, rect.x : rect.x + side]
            tiles.append(Tile(index=r * cols + c, rect=rect, pixels=pix))
    return tiles


def weak_label_image(score: float) -> WeakLabel:
    if score < 0:
        raise ValueError(f"negative score {score}")
    if score < NORMAL_SCORE_MAX:
        return WeakLabel.NORMAL
    if score >= ABNORMAL_SCORE_MIN:
        return WeakLabel.ABNORMAL
    return WeakLabel.UNLABELED


def label_background_tiles(tiles: Sequence[Tile], mask: ForegroundMask) -> list[Tile]:
    """Flag tiles whose clipped foreground fraction is <= 2% (inclusive boundary)."""
    out = []
    h, w = mask.pixels.shape
    for t in tiles:
        clipped = t.rect.clipped(w, h)
        bg = True if clipped.area == 0 else is_background(foreground_fraction(mask, t.rect))
        out.append(replace(t, background=bg))
    return out


def tile_class_label(tile: Tile, image_label: WeakLabel) -> WeakLabel:
    """Background flag overrides the image-level weak label."""
    return WeakLabel.BACKGROUND if tile.background else image_label


def rank_and_sample(tiles: Sequence[Tile], k: int, source_id: str = "", score=None) -> PatchBag:
    """Top-K sampling in bucket order (abnormal, normal, background).

    Buckets are keyed by argmax class; each bucket is sorted by p_abnormal
    descending with ties broken by row-major tile index, so the result is
    invariant to input ordering. Fewer than K tiles repeat cyclically.
    """
    if k < 1:
        raise ValueError(f"K must be positive, got {k}")
    if not tiles:
        raise ValueError("no tiles to sample")
    buckets: dict[int, list[Tile]] = {CLASS_ABNORMAL: [], CLASS_NORMAL: [], CLASS_BACKGROUND: []}
    for t in tiles:
        buckets[t.argmax_class].append(t)
    ordered: list[Tile] = []
    for cls in (CLASS_ABNORMAL, CLASS_NORMAL, CLASS_BACKGROUND):
        ordered.extend(sorted(buckets[cls], key=lambda t: (-t.p_abnormal, t.index)))
    truncated = len(ordered) < k
    sampled = [ordered[i % len(ordered)] for i in range(k)] if truncated else ordered[:k]
    records = tuple(
        PatchRecord(
            pixels=t.pixels,
            rect=t.rect,
            tag=CLASS_NAMES[t.argmax_class],
            tile_index=t.index,
            p_abnormal=t.p_abnormal,
        )
        for t in sampled
    )
    return PatchBag(source_id=source_id, scheme=1, patches=records, truncated=truncated, score=score)
