"""Core domain types: radiographs, dataset manifests, splits, score standardization."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SVDH_MAX = 448.0
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised when a manifest file violates the format or its invariants."""


@dataclass(frozen=True)
class Radiograph:
    """A grayscale radiograph with optional score and landmark annotations."""

    id: str
    pixels: np.ndarray
    score: Optional[float] = None
    landmarks: Optional[object] = None  # LandmarkSet, kept loose to avoid a cycle

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"radiograph {self.id!r}: pixels must be a non-empty 2-D array")
        if self.score is not None and not (0.0 <= self.score <= SVDH_MAX):
            raise ValueError(f"radiograph {self.id!r}: score {self.score} outside [0, {SVDH_MAX}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    score: Optional[float]
    landmarks: Optional[str]
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            seen.add(e.id)

    def split(self, tag: str) -> list[ManifestEntry]:
        if tag not in SPLITS:
            raise ValueError(f"unknown split tag {tag!r}")
        return [e for e in self.entries if e.split == tag]

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def landmark_path(self, entry: ManifestEntry) -> Optional[Path]:
        return self.root / entry.landmarks if entry.landmarks else None


MANIFEST_HEADER = ["id", "image", "score", "landmarks", "split"]


def load_manifest(path) -> DatasetManifest:
    """Load and validate a comma-delimited manifest with header id,image,score,landmarks,split."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header!r}, expected {MANIFEST_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            rid, image, score_s, lms, split = (c.strip() for c in row)
            if not rid:
                raise ManifestError(f"{path}:{lineno}: empty id")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split tag {split!r} for id {rid!r}")
            score: Optional[float] = None
            if score_s:
                try:
                    score = float(score_s)
                except ValueError:
                    raise ManifestError(
                        f"{path}:{lineno}: unparseable score {score_s!r} for id {rid!r}"
                    ) from None
                if not math.isfinite(score) or score < 0:
                    raise ManifestError(
                        f"{path}:{lineno}: score {score_s!r} for id {rid!r} must be finite and >= 0"
                    )
            entries.append(ManifestEntry(rid, image, score, lms or None, split))
    try:
        return DatasetManifest(tuple(entries), root=path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow(
                [e.id, e.image, "" if e.score is None else repr(e.score), e.landmarks or "", e.split]
            )


def assign_splits(ids: Sequence[str], fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict:
    """Deterministically assign train/val/test tags; same ids + seed give the same mapping."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three values summing to 1")
    order = list(ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = {}
    for i, rid in enumerate(order):
        if i < n_train:
            tags[rid] = "train"
        elif i < n_train + n_val:
            tags[rid] = "val"
        else:
            tags[rid] = "test"
    return tags


def split_fingerprint(ids: Sequence[str]) -> str:
    """Stable digest of a split's membership, recorded by the standardizer."""
    h = hashlib.sha256()
    for rid in sorted(set(ids)):
        h.update(rid.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class ScoreStandardizer:
    """Affine map to zero mean / unit SD, fitted on training-split scores only."""

    mean: float
    sd: float
    split_id: Optional[str] = None

    def __post_init__(self):
        if not (self.sd > 0):
            raise ValueError(f"standardizer sd must be positive, got {self.sd}")

    def apply(self, y: float) -> float:
        return (y - self.mean) / self.sd

    def invert(self, z: float) -> float:
        return z * self.sd + self.mean


def fit_standardizer(scores: Sequence[float], split_id: Optional[str] = None) -> ScoreStandardizer:
    """Population mean/SD of the given scores (divide by N)."""
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot fit standardizer on an empty score list")
    mean = float(arr.mean())
    sd = float(arr.std())  # population convention
    if sd == 0.0:
        raise ValueError("cannot standardize scores with zero variance")
    return ScoreStandardizer(mean=mean, sd=sd, split_id=split_id)
