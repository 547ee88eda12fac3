"""End-to-end stage wiring: manifest loading, patch-classifier data assembly,
bag construction for both schemes, and scored evaluation.

Stage order is enforced here, not left to callers: scheme 1 ABMIL data flows
augment -> tile -> classify -> sample -> extract (patch-classifier training
crops tiles first and augments the patches); scheme 2 flows augment ->
landmarks (optionally noise-injected) -> align -> crop -> extract.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .bags import FeatureBag, PatchBag
from .data import (
    DatasetManifest,
    ManifestEntry,
    Radiograph,
    ScoreStandardizer,
    fit_standardizer,
    split_fingerprint,
)
from .foreground import ForegroundMask, MaskConfig, generate_mask, load_mask, mask_filename, postprocess_mask, save_mask
from .joints import (
    JointPatchSpec,
    LandmarkSet,
    align_to_standard,
    crop_joint_patches,
    estimate_pixel_spacing,
    load_landmarks,
    perturb_landmarks,
)
from .patch_classifier import FeatureExtractor, PatchClassifier, classify_patches, extract_features
from .tiling import (
    CLASS_ABNORMAL,
    CLASS_BACKGROUND,
    CLASS_NORMAL,
    Tile,
    WeakLabel,
    label_background_tiles,
    partition_tiles,
    rank_and_sample,
    tile_class_label,
    weak_label_image,
)
from .training import AugmentationPolicy, augment


def load_radiograph(manifest: DatasetManifest, entry: ManifestEntry,
                    with_landmarks: bool = False) -> Radiograph:
    path = manifest.image_path(entry)
    pixels = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if pixels is None:
        raise FileNotFoundError(f"cannot read image {path} for id {entry.id!r}")
    lms = None
    if with_landmarks:
        lm_path = manifest.landmark_path(entry)
        if lm_path is None:
            raise FileNotFoundError(f"entry {entry.id!r} has no landmark file")
        lms = load_landmarks(lm_path)
    return Radiograph(entry.id, pixels, score=entry.score, landmarks=lms)


def get_mask(img: Radiograph, masks_dir: Optional[Path] = None,
             cfg: MaskConfig = MaskConfig()) -> ForegroundMask:
    """Cached-on-disk morphological mask; externally imported files win."""
    if masks_dir is not None:
        cached = Path(masks_dir) / mask_filename(img.id)
        if cached.is_file():
            return load_mask(cached, img.id)
    mask = postprocess_mask(generate_mask(img, cfg), cfg)
    if masks_dir is not None:
        Path(masks_dir).mkdir(parents=True, exist_ok=True)
        save_mask(mask, masks_dir)
    return mask


def fit_split_standardizer(manifest: DatasetManifest) -> ScoreStandardizer:
    """Standardizer from training-split scores only, fingerprinted by the split ids."""
    train = [e for e in manifest.split("train") if e.score is not None]
    return fit_standardizer(
        [e.score for e in train], split_id=split_fingerprint([e.id for e in train])
    )


# ---------------------------------------------------------------------------
# Patch-classifier training data

PC_LABEL_OF = {
    WeakLabel.NORMAL: CLASS_NORMAL,
    WeakLabel.ABNORMAL: CLASS_ABNORMAL,
    WeakLabel.BACKGROUND: CLASS_BACKGROUND,
}


def pc_data_scheme1(
    images: Sequence[Radiograph],
    masks: Sequence[ForegroundMask],
    rng: np.random.Generator,
    tiles_per_image: int = 40,
    policy: AugmentationPolicy = AugmentationPolicy.identity(),
):
    """3-class tile dataset from weakly normal/abnormal images.

    Tiles are cropped first and then augmented; middle-score images are skipped.
    """
    patches, labels = [], []
    for img, mask in zip(images, masks):
        weak = weak_label_image(img.score)
        if weak is WeakLabel.UNLABELED:
            continue
        tiles = label_background_tiles(partition_tiles(img), mask)
        fg = [t.index for t in tiles if not t.background]
        bg = [t.index for t in tiles if t.background]
        # keep every foreground tile; background is plentiful, so cap it
        n_bg = min(len(bg), max(tiles_per_image - len(fg), len(fg) // 2))
        picked = fg + list(rng.choice(bg, size=n_bg, replace=False))
        for ti in picked:
            tile = tiles[ti]
            patch = Radiograph(f"{img.id}#t{tile.index}", tile.pixels, score=None)
            aug, _ = augment(patch, None, policy, rng)
            patches.append(aug.pixels)
            labels.append(PC_LABEL_OF[tile_class_label(tile, weak)])
    return patches, labels


def pc_data_scheme2(
    images: Sequence[Radiograph],
    spec: JointPatchSpec,
    rng: np.random.Generator,
    out_size: int,
    policy: AugmentationPolicy = AugmentationPolicy.identity(),
    patches_per_image: int = 20,
):
    """Binary joint-patch dataset: every patch inherits its image's weak label.

    Whole images are augmented first, then joint-patched.
    """
    patches, labels = [], []
    for img in images:
        weak = weak_label_image(img.score)
        if weak is WeakLabel.UNLABELED:
            continue
        if img.landmarks is None:
            raise ValueError(f"image {img.id!r} lacks landmarks for scheme 2")
        aug, lms = augment(img, img.landmarks, policy, rng)
        aligned, aligned_lms, _ = align_to_standard(aug, lms)
        spacing = _mean_spacing(aligned_lms)
        bag = crop_joint_patches(aligned, aligned_lms, spec, spacing, out_size)
        picked = rng.choice(len(bag), size=min(patches_per_image, len(bag)), replace=False)
        for pi in picked:
            patches.append(bag.patches[pi].pixels)
            labels.append(0 if weak is WeakLabel.NORMAL else 1)
    return patches, labels


# ---------------------------------------------------------------------------
# Bag construction

def _mean_spacing(lms: LandmarkSet) -> float:
    return (estimate_pixel_spacing(lms, "left") + estimate_pixel_spacing(lms, "right")) / 2.0


def classify_tiles(tiles: Sequence[Tile], classifier: PatchClassifier) -> list[Tile]:
    probs = classify_patches(classifier, [t.pixels for t in tiles])
    # renormalize away float32 softmax round-off
    probs /= probs.sum(axis=1, keepdims=True)
    from dataclasses import replace

    return [replace(t, class_probs=tuple(p)) for t, p in zip(tiles, probs)]


def build_bag_scheme1(img: Radiograph, classifier: PatchClassifier, k: int) -> PatchBag:
    tiles = classify_tiles(partition_tiles(img), classifier)
    return rank_and_sample(tiles, k, source_id=img.id, score=img.score)


def build_bag_scheme2(
    img: Radiograph,
    lms: LandmarkSet,
    spec: JointPatchSpec,
    out_size: int,
    perturb_sds_mm: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> PatchBag:
    aligned, aligned_lms, _ = align_to_standard(img, lms)
    spacing = _mean_spacing(aligned_lms)
    if perturb_sds_mm is not None:
        if rng is None:
            raise ValueError("landmark perturbation needs an rng")
        aligned_lms = perturb_landmarks(aligned_lms, perturb_sds_mm, spacing, rng)
    return crop_joint_patches(aligned, aligned_lms, spec, spacing, out_size)


@dataclass
class BagBuilder:
    """Builds (patch bag, feature bag) pairs for one scheme, with optional
    training-time augmentation views (view 0 is always the identity)."""

    scheme: int
    extractor: FeatureExtractor
    classifier: Optional[PatchClassifier] = None  # scheme 1
    k: int = 30
    joint_spec: Optional[JointPatchSpec] = None  # scheme 2
    patch_size: int = 224
    perturb_sds_mm: Optional[np.ndarray] = None  # scheme 2, training only

    def build(
        self,
        img: Radiograph,
        policy: Optional[AugmentationPolicy] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[PatchBag, FeatureBag]:
        lms = img.landmarks
        if policy is not None:
            img, lms = augment(img, lms, policy, rng)
        if self.scheme == 1:
            if self.classifier is None:
                raise ValueError("scheme 1 needs the tile classifier")
            bag = build_bag_scheme1(img, self.classifier, self.k)
        else:
            if self.joint_spec is None:
                raise ValueError("scheme 2 needs a joint patch spec")
            if lms is None:
                raise ValueError(f"image {img.id!r} lacks landmarks for scheme 2")
            bag = build_bag_scheme2(
                img, lms, self.joint_spec, self.patch_size,
                perturb_sds_mm=self.perturb_sds_mm, rng=rng,
            )
        return bag, extract_features(self.extractor, bag)


def build_feature_bags(
    builder: BagBuilder,
    images: Sequence[Radiograph],
    policy: Optional[AugmentationPolicy] = None,
    rng: Optional[np.random.Generator] = None,
    views: int = 1,
):
    """One identity view per image plus (views - 1) augmented views."""
    patch_bags, feature_bags = [], []
    for img in images:
        for v in range(views):
            pb, fb = builder.build(img, policy if v > 0 else None, rng)
            patch_bags.append(pb)
            feature_bags.append(fb)
    return patch_bags, feature_bags
