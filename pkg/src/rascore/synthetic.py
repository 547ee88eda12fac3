"""Procedural hand-like radiographs with ground-truth landmarks, lesions, scores,
and foreground masks. The emitted files use the same manifest/image/landmark
formats as real data, so the rest of the pipeline cannot tell the difference.

Hands are capsule-chain skeletons: a soft-tissue silhouette, brighter bone
cores, and dark lesion discs anchored at joint landmarks (mimicking erosion).
The image-level score is score_per_lesion * lesion count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .data import DatasetManifest, ManifestEntry, Radiograph, save_manifest
from .geom import Rect
from .joints import LOCAL_NAMES, LandmarkSet, N_PER_HAND, save_landmarks
from .tiling import tile_side

# Local hand template in [0,1]^2 hand-box coordinates, fingers up, LOCAL_NAMES order.
def _template() -> np.ndarray:
    pts = {}
    pts["wrist_radial_styloid"] = (0.30, 0.93)
    pts["wrist_ulnar_styloid"] = (0.70, 0.93)
    pts["distal_radius"] = (0.38, 0.99)
    pts["distal_ulna"] = (0.62, 0.99)
    for k in range(9):
        pts[f"carpal_{k}"] = (0.38 + 0.12 * (k % 3), 0.76 + 0.06 * (k // 3))
    for name, x, y in [
        ("mc_base_thumb", 0.20, 0.74),
        ("mc_base_index", 0.35, 0.70),
        ("mc_base_middle", 0.48, 0.69),
        ("mc_base_ring", 0.60, 0.70),
        ("mc_base_little", 0.72, 0.72),
    ]:
        pts[name] = (x, y)
    pts["thumb_mcp"] = (0.14, 0.62)
    pts["thumb_ip"] = (0.10, 0.53)
    pts["thumb_tip"] = (0.07, 0.45)
    finger_y = {
        "index": (0.52, 0.38, 0.30, 0.23),
        "middle": (0.50, 0.34, 0.25, 0.17),
        "ring": (0.51, 0.36, 0.27, 0.20),
        "little": (0.54, 0.43, 0.36, 0.30),
    }
    base_x = {"index": 0.33, "middle": 0.47, "ring": 0.61, "little": 0.74}
    for finger, ys in finger_y.items():
        bx = base_x[finger]
        for t, (joint, y) in enumerate(zip(("mcp", "pip", "dip", "tip"), ys)):
            x = bx + (bx - 0.48) * 0.10 * t
            pts[f"{finger}_{joint}"] = (x, y)
    return np.array([pts[name] for name in LOCAL_NAMES])


_TEMPLATE = _template()
_IDX = {name: i for i, name in enumerate(LOCAL_NAMES)}

# bone segments as (landmark a, landmark b, radius in px at unit hand scale)
_BONES = (
    [("mc_base_thumb", "thumb_mcp", 6), ("thumb_mcp", "thumb_ip", 5), ("thumb_ip", "thumb_tip", 4)]
    + [
        (f"mc_base_{f}", f"{f}_mcp", 6)
        for f in ("index", "middle", "ring", "little")
    ]
    + [
        (f"{f}_{a}", f"{f}_{b}", r)
        for f in ("index", "middle", "ring", "little")
        for a, b, r in (("mcp", "pip", 5), ("pip", "dip", 5), ("dip", "tip", 4))
    ]
    + [
        ("wrist_radial_styloid", "wrist_ulnar_styloid", 10),
        ("distal_radius", "distal_ulna", 10),
        ("carpal_0", "carpal_2", 9),
        ("carpal_3", "carpal_5", 9),
        ("carpal_6", "carpal_8", 9),
    ]
)

# joints eligible to carry a lesion (the single-landmark scoreable joints)
LESION_JOINTS = (
    [f"mc_base_{f}" for f in ("thumb", "index", "middle", "ring", "little")]
    + ["thumb_mcp", "thumb_ip"]
    + [f"{f}_{j}" for f in ("index", "middle", "ring", "little") for j in ("mcp", "pip", "dip")]
)


@dataclass(frozen=True)
class Lesion:
    cx: float
    cy: float
    radius: int
    landmark_index: int  # global landmark the lesion is anchored on


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 320
    width: int = 384
    hand_box: tuple[int, int] = (160, 280)  # per-hand extent in px
    score_per_lesion: float = 10.0
    max_lesions: int = 8
    lesion_radius: tuple[int, int] = (5, 7)
    background_intensity: int = 20
    soft_intensity: int = 140
    bone_intensity: int = 200
    lesion_intensity: int = 40
    noise_sd: float = 2.0
    rotation_deg: float = 6.0
    seed: int = 0

    def __post_init__(self):
        min_bone_radius = 4
        if self.lesion_radius[0] < 1 or self.lesion_radius[1] > 3 * min_bone_radius:
            raise ValueError("infeasible lesion radius for the rendered joint size")


@dataclass(frozen=True)
class SyntheticSample:
    image: Radiograph
    landmarks: LandmarkSet
    lesions: tuple[Lesion, ...]
    fg_mask: np.ndarray  # ground-truth foreground, uint8 {0,1}


def _hand_landmarks(spec: SyntheticSpec, origin, mirror: bool, rng) -> np.ndarray:
    local = _TEMPLATE.copy()
    if mirror:
        local[:, 0] = 1.0 - local[:, 0]
    bw, bh = spec.hand_box
    scale = rng.uniform(0.9, 1.02)
    angle = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    centered = (local - 0.5) * np.array([bw, bh]) * scale
    rotated = centered @ np.array([[cos_a, -sin_a], [sin_a, cos_a]]).T
    shift = np.array(origin) + np.array([bw / 2, bh / 2]) + rng.uniform(-5, 5, 2)
    pts = rotated + shift
    pts += rng.uniform(-1.5, 1.5, pts.shape)  # per-landmark jitter
    return pts


def _draw_hand(soft: np.ndarray, bone: np.ndarray, pts: np.ndarray, scale: float) -> None:
    for a, b, radius in _BONES:
        pa = tuple(np.round(pts[_IDX[a]]).astype(int))
        pb = tuple(np.round(pts[_IDX[b]]).astype(int))
        r = max(2, int(round(radius * scale)))
        cv2.line(bone, pa, pb, 1, thickness=2 * r, lineType=cv2.LINE_8)
        cv2.line(soft, pa, pb, 1, thickness=2 * r + int(round(8 * scale)), lineType=cv2.LINE_8)
    # palm fill between metacarpal bases and finger MCPs
    hull_names = [
        "mc_base_thumb", "mc_base_little", "little_mcp", "ring_mcp", "middle_mcp",
        "index_mcp", "thumb_mcp", "wrist_radial_styloid", "wrist_ulnar_styloid",
    ]
    hull = cv2.convexHull(np.round(pts[[_IDX[n] for n in hull_names]]).astype(np.int32))
    cv2.fillConvexPoly(soft, hull, 1)


def generate(spec: SyntheticSpec, n: int, id_prefix: str = "synth") -> list[SyntheticSample]:
    """Deterministic under spec.seed; lesion counts cycle uniformly over 0..max."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    samples = []
    bw = spec.hand_box[0]
    margin_x = (spec.width - 2 * bw) // 3
    top = (spec.height - spec.hand_box[1]) // 2
    for i in range(n):
        soft = np.zeros((spec.height, spec.width), np.uint8)
        bone = np.zeros_like(soft)
        left = _hand_landmarks(spec, (margin_x, top), mirror=False, rng=rng)
        right = _hand_landmarks(spec, (2 * margin_x + bw, top), mirror=True, rng=rng)
        scale = 1.0
        _draw_hand(soft, bone, left, scale)
        _draw_hand(soft, bone, right, scale)
        all_pts = np.vstack([left, right])
        all_pts[:, 0] = np.clip(all_pts[:, 0], 1, spec.width - 2)
        all_pts[:, 1] = np.clip(all_pts[:, 1], 1, spec.height - 2)
        lms = LandmarkSet(all_pts)

        img = np.full((spec.height, spec.width), spec.background_intensity, np.float32)
        img[soft > 0] = spec.soft_intensity
        img[bone > 0] = spec.bone_intensity

        count = int(rng.integers(0, spec.max_lesions + 1))
        candidates = [
            off + _IDX[name] for off in (0, N_PER_HAND) for name in LESION_JOINTS
        ]
        chosen = rng.choice(len(candidates), size=count, replace=False)
        lesions = []
        for ci in chosen:
            gidx = candidates[ci]
            cx, cy = all_pts[gidx] + rng.uniform(-1.0, 1.0, 2)
            radius = int(rng.integers(spec.lesion_radius[0], spec.lesion_radius[1] + 1))
            cv2.circle(
                img, (int(round(cx)), int(round(cy))), radius,
                float(spec.lesion_intensity), thickness=-1,
            )
            lesions.append(Lesion(float(cx), float(cy), radius, gidx))
        img += rng.normal(0.0, spec.noise_sd, img.shape)
        pixels = np.clip(img, 0, 255).astype(np.uint8)
        score = spec.score_per_lesion * count
        rid = f"{id_prefix}{i:04d}"
        samples.append(
            SyntheticSample(
                image=Radiograph(rid, pixels, score=score, landmarks=lms),
                landmarks=lms,
                lesions=tuple(lesions),
                fg_mask=np.maximum(soft, bone),
            )
        )
    return samples


def oracle_best_bag(sample: SyntheticSample, tile_side_px: Optional[int] = None) -> set[int]:
    """Indices of grid tiles intersecting any lesion disc (same grid as partition_tiles)."""
    h, w = sample.image.pixels.shape
    side = tile_side_px or tile_side(h, w)
    cols = math.ceil(w / side)
    rows = math.ceil(h / side)
    hits = set()
    for r in range(rows):
        for c in range(cols):
            rect = Rect(c * side, r * side, side, side)
            for les in sample.lesions:
                # circle-rectangle intersection via closest point
                px = min(max(les.cx, rect.x), rect.x + rect.w - 1)
                py = min(max(les.cy, rect.y), rect.y + rect.h - 1)
                if (px - les.cx) ** 2 + (py - les.cy) ** 2 <= les.radius**2:
                    hits.add(r * cols + c)
                    break
    return hits


def write_dataset(
    samples: list[SyntheticSample],
    out_dir,
    counts: tuple[int, int, int],
) -> Path:
    """Write images, landmark files, ground-truth masks, and a manifest.

    counts = (train, val, test), assigned in generation order; must sum to
    len(samples).
    """
    if sum(counts) != len(samples):
        raise ValueError(f"split counts {counts} do not sum to {len(samples)} samples")
    out_dir = Path(out_dir)
    for sub in ("images", "landmarks", "truth_masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    tags = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    entries = []
    for sample, tag in zip(samples, tags):
        rid = sample.image.id
        cv2.imwrite(str(out_dir / "images" / f"{rid}.png"), sample.image.pixels)
        lm_rel = f"landmarks/{rid}.lms.csv"
        save_landmarks(sample.landmarks, out_dir / lm_rel)
        cv2.imwrite(str(out_dir / "truth_masks" / f"{rid}.png"), sample.fg_mask * 255)
        entries.append(ManifestEntry(rid, f"images/{rid}.png", sample.image.score, lm_rel, tag))
    manifest = DatasetManifest(tuple(entries), root=out_dir)
    path = out_dir / "manifest.csv"
    save_manifest(manifest, path)
    return path
