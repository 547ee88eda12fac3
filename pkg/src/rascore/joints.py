"""Scheme 2 geometry: dual-hand landmarks, heatmap render/decode, pixel spacing,
orientation alignment, joint-patch cropping, landmark noise, and MRE/SDR metrics.

Landmark schema (37 per hand, left-side hand occupies indices 0-36, right-side
37-73; "left"/"right" means position in the image, not anatomical side):

    0  wrist_radial_styloid     } wrist-width endpoints
    1  wrist_ulnar_styloid      }
    2  distal_radius
    3  distal_ulna
    4-12   carpal_0 .. carpal_8
    13-17  mc_base_thumb .. mc_base_little (CMC joints)
    18-20  thumb_mcp, thumb_ip, thumb_tip
    21-24  index_mcp, index_pip, index_dip, index_tip
    25-28  middle_mcp, middle_pip, middle_dip, middle_tip
    29-32  ring_mcp, ring_pip, ring_dip, ring_tip
    33-36  little_mcp, little_pip, little_dip, little_tip
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .bags import PatchBag, PatchRecord
from .data import Radiograph
from .geom import Rect

N_PER_HAND = 37
N_LANDMARKS = 74
WRIST_ENDPOINTS = (0, 1)  # local indices of the wrist-width segment
MIDDLE_TIP = 28  # local index of the middle fingertip (alignment axis)
WRIST_WIDTH_MM = 50.0
SDR_THRESHOLDS_MM = (2.0, 3.0, 4.0, 10.0)

LOCAL_NAMES = (
    ["wrist_radial_styloid", "wrist_ulnar_styloid", "distal_radius", "distal_ulna"]
    + [f"carpal_{i}" for i in range(9)]
    + [f"mc_base_{f}" for f in ("thumb", "index", "middle", "ring", "little")]
    + ["thumb_mcp", "thumb_ip", "thumb_tip"]
    + [
        f"{f}_{j}"
        for f in ("index", "middle", "ring", "little")
        for j in ("mcp", "pip", "dip", "tip")
    ]
)
assert len(LOCAL_NAMES) == N_PER_HAND


@dataclass(frozen=True)
class LandmarkSet:
    """74 ordered (x, y) points in image pixel coordinates."""

    points: np.ndarray  # (74, 2) float64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected {N_LANDMARKS} landmarks, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks must be finite")
        object.__setattr__(self, "points", pts)

    def hand(self, side: str) -> np.ndarray:
        """37 x 2 view for 'left' or 'right' (position in the image)."""
        off = hand_offset(side)
        return self.points[off : off + N_PER_HAND]

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]))


def hand_offset(side: str) -> int:
    if side == "left":
        return 0
    if side == "right":
        return N_PER_HAND
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def save_landmarks(lms: LandmarkSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, (x, y) in enumerate(lms.points):
            fh.write(f"{i},{float(x)!r},{float(y)!r}\n")


def load_landmarks(path) -> LandmarkSet:
    pts = np.full((N_LANDMARKS, 2), np.nan)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                idx_s, x_s, y_s = line.split(",")
                pts[int(idx_s)] = (float(x_s), float(y_s))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: bad landmark line {line!r}") from None
    if np.any(np.isnan(pts)):
        missing = np.where(np.isnan(pts[:, 0]))[0]
        raise ValueError(f"{path}: missing landmark indices {missing.tolist()}")
    return LandmarkSet(pts)


def hands_crossed(lms: LandmarkSet) -> bool:
    """Diagnostic for left/right confusion: per-hand mean x-coordinates swapped."""
    return float(lms.hand("left")[:, 0].mean()) > float(lms.hand("right")[:, 0].mean())


# ---------------------------------------------------------------------------
# Heatmaps

@dataclass(frozen=True)
class HeatmapStack:
    """74-channel nonnegative heatmaps; scale = image pixels per heatmap pixel."""

    channels: np.ndarray  # (74, Hh, Wh)
    scale: float

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[0] != N_LANDMARKS:
            raise ValueError(f"expected ({N_LANDMARKS}, H, W) heatmaps, got {ch.shape}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "channels", ch)


def render_target_heatmaps(lms: LandmarkSet, shape: tuple[int, int], sigma: float,
                           scale: float = 1.0) -> HeatmapStack:
    """Unnormalized Gaussian targets, SD sigma in heatmap pixels, one channel per landmark."""
    hh, wh = shape
    ys = np.arange(hh, dtype=np.float64)[:, None]
    xs = np.arange(wh, dtype=np.float64)[None, :]
    channels = np.empty((N_LANDMARKS, hh, wh))
    for c, (x, y) in enumerate(lms.points):
        cx, cy = x / scale, y / scale
        if sigma <= 0:  # one-hot limit
            hm = np.zeros((hh, wh))
            hm[min(hh - 1, max(0, round(cy))), min(wh - 1, max(0, round(cx)))] = 1.0
        else:
            d2 = (xs - cx) ** 2 + (ys - cy) ** 2
            hm = np.exp(-d2 / (2.0 * sigma * sigma))
        channels[c] = hm
    return HeatmapStack(channels, scale)


def decode_heatmaps(hi: HeatmapStack, lo: HeatmapStack) -> LandmarkSet:
    """Per channel, argmax each stack mapped to image coordinates, then averaged."""
    pts = np.empty((N_LANDMARKS, 2))
    for c in range(N_LANDMARKS):
        coords = []
        for stack in (hi, lo):
            ch = stack.channels[c]
            if ch.max() <= 0:
                raise ValueError(f"heatmap channel {c} is all zero, cannot decode")
            iy, ix = np.unravel_index(int(np.argmax(ch)), ch.shape)
            coords.append((ix * stack.scale, iy * stack.scale))
        pts[c] = np.mean(coords, axis=0)
    return LandmarkSet(pts)


# ---------------------------------------------------------------------------
# Pixel spacing and alignment

def estimate_pixel_spacing(lms: LandmarkSet, side: str) -> float:
    """mm per pixel from an assumed 50 mm wrist width."""
    hand = lms.hand(side)
    a, b = hand[WRIST_ENDPOINTS[0]], hand[WRIST_ENDPOINTS[1]]
    dist = float(np.hypot(*(a - b)))
    if dist == 0:
        raise ValueError(f"wrist endpoints coincide for {side} hand")
    return WRIST_WIDTH_MM / dist


@dataclass(frozen=True)
class RigidTransform:
    """2x3 affine (rotation about a center) applied to image and landmarks alike."""

    matrix: np.ndarray  # (2, 3)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "RigidTransform":
        full = np.vstack([self.matrix, [0.0, 0.0, 1.0]])
        return RigidTransform(np.linalg.inv(full)[:2])


def _hand_axis_angle(lms: LandmarkSet, side: str) -> float:
    """Angle (radians) of the wrist-midpoint -> middle-fingertip axis, 0 = pointing up."""
    hand = lms.hand(side)
    wrist_mid = (hand[WRIST_ENDPOINTS[0]] + hand[WRIST_ENDPOINTS[1]]) / 2.0
    axis = hand[MIDDLE_TIP] - wrist_mid
    if np.hypot(*axis) == 0:
        raise ValueError(f"degenerate hand axis for {side} hand")
    # y grows downward; "up" is (0, -1)
    return math.atan2(axis[0], -axis[1])


def align_to_standard(img: Radiograph, lms: LandmarkSet):
    """Rotate so fingers point upward.

    Both hands' axis angles are combined (circular mean) into one rotation about
    the image center; the landmarks are transformed consistently and the
    invertible transform is returned.
    """
    angles = [_hand_axis_angle(lms, "left"), _hand_axis_angle(lms, "right")]
    mean_angle = math.atan2(
        sum(math.sin(a) for a in angles), sum(math.cos(a) for a in angles)
    )
    center = ((img.width - 1) / 2.0, (img.height - 1) / 2.0)
    matrix = cv2.getRotationMatrix2D(center, math.degrees(mean_angle), 1.0)
    transform = RigidTransform(np.asarray(matrix))
    aligned_pix = cv2.warpAffine(
        img.pixels.astype(np.float32), matrix.astype(np.float32),
        (img.width, img.height), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
    )
    aligned = Radiograph(img.id, aligned_pix, score=img.score)
    return aligned, LandmarkSet(transform.apply_points(lms.points)), transform


# ---------------------------------------------------------------------------
# Joint patch specification and cropping

@dataclass(frozen=True)
class JointPatchEntry:
    name: str
    anchors: tuple[int, ...]  # local landmark indices; center = anchor centroid
    side_mm: float

    def __post_init__(self):
        if self.side_mm <= 0:
            raise ValueError(f"patch {self.name}: side must be positive")
        if not self.anchors or any(not 0 <= a < N_PER_HAND for a in self.anchors):
            raise ValueError(f"patch {self.name}: bad anchors {self.anchors}")


@dataclass(frozen=True)
class JointPatchSpec:
    entries: tuple[JointPatchEntry, ...]

    def __post_init__(self):
        if len(self.entries) != 25:
            raise ValueError(f"joint patch spec needs 25 entries, got {len(self.entries)}")


def _name_index(name: str) -> int:
    return LOCAL_NAMES.index(name)


def default_joint_patch_spec(joint_side_mm: float = 24.0, wrist_side_mm: float = 36.0) -> JointPatchSpec:
    """19 single-landmark joint patches plus 6 wider wrist patches per hand."""
    joints = (
        [f"mc_base_{f}" for f in ("thumb", "index", "middle", "ring", "little")]
        + ["thumb_mcp", "thumb_ip"]
        + [f"{f}_{j}" for f in ("index", "middle", "ring", "little") for j in ("mcp", "pip", "dip")]
    )
    assert len(joints) == 19
    entries = [JointPatchEntry(n, (_name_index(n),), joint_side_mm) for n in joints]
    wrist_groups = {
        "radiocarpal": ("wrist_radial_styloid", "distal_radius", "carpal_0"),
        "ulnocarpal": ("wrist_ulnar_styloid", "distal_ulna", "carpal_2"),
        "midcarpal_radial": ("carpal_0", "carpal_3", "carpal_4"),
        "midcarpal_central": ("carpal_1", "carpal_4", "carpal_7"),
        "midcarpal_ulnar": ("carpal_2", "carpal_5", "carpal_8"),
        "carpometacarpal_row": ("carpal_6", "carpal_7", "carpal_8"),
    }
    for name, anchors in wrist_groups.items():
        entries.append(JointPatchEntry(name, tuple(_name_index(a) for a in anchors), wrist_side_mm))
    return JointPatchSpec(tuple(entries))


def save_joint_patch_spec(spec: JointPatchSpec, path) -> None:
    payload = [
        {"name": e.name, "anchors": list(e.anchors), "side_mm": e.side_mm} for e in spec.entries
    ]
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_joint_patch_spec(path) -> JointPatchSpec:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return JointPatchSpec(
        tuple(JointPatchEntry(e["name"], tuple(e["anchors"]), float(e["side_mm"])) for e in payload)
    )


def resize_nearest(patch: np.ndarray, out: int) -> np.ndarray:
    """Symmetric-grid nearest-neighbor resize; commutes exactly with 90-degree rotations."""
    h, w = patch.shape
    rows = np.floor((np.arange(out) + 0.5) * h / out).astype(int)
    cols = np.floor((np.arange(out) + 0.5) * w / out).astype(int)
    return patch[np.ix_(rows, cols)]


def _odd(n: int) -> int:
    return n if n % 2 == 1 else n + 1


def crop_square(pixels: np.ndarray, cx: int, cy: int, side: int):
    """Odd-sided square crop centered on (cx, cy), edge-padding past the border."""
    half = side // 2
    h, w = pixels.shape
    x0, y0 = cx - half, cy - half
    x1, y1 = x0 + side, y0 + side
    pad_l, pad_t = max(0, -x0), max(0, -y0)
    pad_r, pad_b = max(0, x1 - w), max(0, y1 - h)
    window = pixels[max(0, y0) : min(h, y1), max(0, x0) : min(w, x1)]
    padded = bool(pad_l or pad_t or pad_r or pad_b)
    if padded:
        if window.size == 0:
            window = np.zeros((side, side), dtype=pixels.dtype)
            return window, Rect(x0, y0, side, side), True
        window = np.pad(window, ((pad_t, pad_b), (pad_l, pad_r)), mode="edge")
    return window, Rect(x0, y0, side, side), padded


def crop_joint_patches(
    img: Radiograph,
    lms: LandmarkSet,
    spec: JointPatchSpec,
    spacing: float,
    out_size: int = 224,
) -> PatchBag:
    """50-patch bag: the 25 spec entries for the left hand, then for the right.

    Patch side is side_mm / spacing rounded to the nearest odd pixel count so
    crops stay exactly equivariant under translations and right-angle rotations.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    records = []
    for side in ("left", "right"):
        hand = lms.hand(side)
        for entry in spec.entries:
            center = hand[list(entry.anchors)].mean(axis=0)
            cx = int(math.floor(center[0] + 0.5))
            cy = int(math.floor(center[1] + 0.5))
            side_px = _odd(max(3, int(round(entry.side_mm / spacing))))
            window, rect, padded = crop_square(img.pixels, cx, cy, side_px)
            pix = resize_nearest(window, out_size)
            records.append(
                PatchRecord(pixels=pix, rect=rect, tag=f"{side}:{entry.name}", padded=padded)
            )
    return PatchBag(source_id=img.id, scheme=2, patches=tuple(records), score=img.score)


# ---------------------------------------------------------------------------
# Landmark noise and localization metrics

def perturb_landmarks(
    lms: LandmarkSet,
    sds_mm: Sequence[float],
    spacing: float,
    rng: np.random.Generator,
) -> LandmarkSet:
    """Displace each landmark radially by |N(0, sd_mm)| in a uniform direction."""
    sds = np.asarray(sds_mm, dtype=np.float64)
    if sds.shape != (N_LANDMARKS,):
        raise ValueError(f"need {N_LANDMARKS} per-landmark SDs, got shape {sds.shape}")
    if np.any(sds < 0):
        raise ValueError("SDs must be nonnegative")
    radii_px = np.abs(rng.normal(0.0, 1.0, N_LANDMARKS)) * sds / spacing
    theta = rng.uniform(0.0, 2.0 * np.pi, N_LANDMARKS)
    offsets = np.stack([radii_px * np.cos(theta), radii_px * np.sin(theta)], axis=1)
    return LandmarkSet(lms.points + offsets)


def mre_sdr(pred: LandmarkSet, truth: LandmarkSet, spacing: float):
    """Mean radial error (mm) and inclusive SDR percentages at 2/3/4/10 mm."""
    errors_mm = np.hypot(*(pred.points - truth.points).T) * spacing
    mre = float(errors_mm.mean())
    sdr = tuple(float((errors_mm <= t).mean() * 100.0) for t in SDR_THRESHOLDS_MM)
    return mre, sdr
