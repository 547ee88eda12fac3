"""Morphological foreground-mask generation and per-rectangle foreground fractions.

Pipeline order: blur -> global (Otsu) threshold -> erosion -> dilation ->
small-component removal. Masks are cached as 1-bit PNGs (<id>.mask.png) and an
import hook accepts externally produced masks in the same format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .data import Radiograph
from .geom import Rect

BACKGROUND_FRACTION_MAX = 0.02  # inclusive: fraction <= 2% means background


@dataclass(frozen=True)
class MaskConfig:
    blur_ksize: int = 5
    erosion_iters: int = 1
    dilation_iters: int = 2
    kernel_size: int = 3
    min_component_frac: float = 0.001  # of image area, removed during generation
    post_min_frac: float = 0.0005  # of image area, removed during post-processing

    def min_component_area(self, shape) -> int:
        return max(1, int(self.min_component_frac * shape[0] * shape[1]))

    def post_min_area(self, shape) -> int:
        return max(1, int(self.post_min_frac * shape[0] * shape[1]))


@dataclass(frozen=True)
class ForegroundMask:
    pixels: np.ndarray  # uint8, values in {0, 1}
    source_id: str
    degenerate: bool = False  # constant-intensity input, mask left empty

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("mask must be 2-D")
        vals = np.unique(self.pixels)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask values must be 0/1")


def _remove_small_components(binary: np.ndarray, min_area: int) -> np.ndarray:
    n, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)
    out = np.zeros_like(binary)
    for lab in range(1, n):
        if stats[lab, cv2.CC_STAT_AREA] >= min_area:
            out[labels == lab] = 1
    return out


def generate_mask(img: Radiograph, cfg: MaskConfig = MaskConfig()) -> ForegroundMask:
    """Binarize a radiograph into a foreground mask via classical morphology."""
    pixels = img.pixels.astype(np.float32)
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi - lo <= 0:
        return ForegroundMask(np.zeros(pixels.shape, np.uint8), img.id, degenerate=True)
    u8 = np.clip((pixels - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    k = cfg.blur_ksize | 1  # cv2 needs an odd kernel
    blurred = cv2.GaussianBlur(u8, (k, k), 0)
    _, binary = cv2.threshold(blurred, 0, 1, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    kernel = np.ones((cfg.kernel_size, cfg.kernel_size), np.uint8)
    if cfg.erosion_iters:
        binary = cv2.erode(binary, kernel, iterations=cfg.erosion_iters)
    if cfg.dilation_iters:
        binary = cv2.dilate(binary, kernel, iterations=cfg.dilation_iters)
    binary = _remove_small_components(binary, cfg.min_component_area(pixels.shape))
    return ForegroundMask(binary.astype(np.uint8), img.id)


def postprocess_mask(mask: ForegroundMask, cfg: MaskConfig = MaskConfig()) -> ForegroundMask:
    """Drop remaining small bright components; idempotent."""
    cleaned = _remove_small_components(
        mask.pixels.astype(np.uint8), cfg.post_min_area(mask.pixels.shape)
    )
    return ForegroundMask(cleaned, mask.source_id, mask.degenerate)


def foreground_fraction(mask: ForegroundMask, rect: Rect) -> float:
    """Fraction of foreground pixels inside rect; rect is clipped to the mask bounds."""
    h, w = mask.pixels.shape
    clipped = rect.clipped(w, h)
    if clipped.area == 0:
        raise ValueError(f"rect {rect} has zero area inside {w}x{h} mask")
    window = mask.pixels[clipped.y : clipped.y + clipped.h, clipped.x : clipped.x + clipped.w]
    return float(window.sum()) / clipped.area


def is_background(fraction: float) -> bool:
    return fraction <= BACKGROUND_FRACTION_MAX


def mask_filename(image_id: str) -> str:
    return f"{image_id}.mask.png"


def save_mask(mask: ForegroundMask, directory) -> Path:
    path = Path(directory) / mask_filename(mask.source_id)
    cv2.imwrite(str(path), mask.pixels * 255)
    return path


def load_mask(path, source_id: Optional[str] = None) -> ForegroundMask:
    """Import hook: read a 0/255 single-channel PNG produced here or by an external segmenter."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read mask file {path}")
    if source_id is None:
        source_id = path.name.removesuffix(".mask.png")
    return ForegroundMask((raw > 127).astype(np.uint8), source_id)
