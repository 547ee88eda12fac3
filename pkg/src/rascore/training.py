"""Training orchestration shared by both schemes: augmentation, the ABMIL
regression loop, checkpoint selection, and prediction ensembling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .abmil import GatedAbmil, ensemble_predict, predict, warm_start_attention
from .bags import FeatureBag, PatchBag
from .data import Radiograph, ScoreStandardizer, split_fingerprint
from .joints import LandmarkSet
from .patch_classifier import FeatureExtractor, patches_to_tensor


@dataclass(frozen=True)
class AugmentationPolicy:
    """Shared policy: flips, 0.9-1.1 intensity scaling, right-angle rotations.

    The affine fields are the scheme 2 extra (small-angle rotation, translation,
    scaling); for landmark-model training use `landmark_training()`, which keeps
    translation and scaling but drops flips and the small-angle rotation.
    """

    flip_prob: float = 0.5
    intensity_range: tuple[float, float] = (0.9, 1.1)
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    affine: bool = False
    affine_max_rotate_deg: float = 5.0
    affine_max_translate_frac: float = 0.03
    affine_scale_range: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        lo, hi = self.intensity_range
        if not (0.9 - 1e-9 <= lo <= hi <= 1.1 + 1e-9):
            raise ValueError("intensity scaling must stay within [0.9, 1.1]")
        if any(r % 90 for r in self.rotations):
            raise ValueError("shared policy allows right-angle rotations only")

    @staticmethod
    def identity() -> "AugmentationPolicy":
        return AugmentationPolicy(flip_prob=0.0, intensity_range=(1.0, 1.0), rotations=(0,))

    @staticmethod
    def landmark_training() -> "AugmentationPolicy":
        # flips disabled: anatomical symmetry confuses left/right landmark indexing
        return AugmentationPolicy(
            flip_prob=0.0, rotations=(0,), affine=True, affine_max_rotate_deg=0.0
        )


def rot90_points(pts: np.ndarray, width: int) -> np.ndarray:
    """One CCW quarter turn: (x, y) -> (y, W-1-x); four applications are the identity."""
    return np.stack([pts[:, 1], width - 1 - pts[:, 0]], axis=1)


def augment(
    img: Radiograph,
    lms: Optional[LandmarkSet],
    policy: AugmentationPolicy,
    rng: np.random.Generator,
):
    """Draw one augmentation; landmarks move with the image, intensity does not move them."""
    pixels = img.pixels.astype(np.float32)
    pts = None if lms is None else lms.points.copy()

    if policy.affine:
        import cv2

        h, w = pixels.shape
        angle = rng.uniform(-policy.affine_max_rotate_deg, policy.affine_max_rotate_deg)
        scale = rng.uniform(*policy.affine_scale_range)
        tx = rng.uniform(-1, 1) * policy.affine_max_translate_frac * w
        ty = rng.uniform(-1, 1) * policy.affine_max_translate_frac * h
        m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, scale)
        m[0, 2] += tx
        m[1, 2] += ty
        pixels = cv2.warpAffine(pixels, m, (w, h), flags=cv2.INTER_LINEAR,
                                borderMode=cv2.BORDER_REPLICATE)
        if pts is not None:
            pts = pts @ m[:, :2].T + m[:, 2]

    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        width = pixels.shape[1]
        pixels = pixels[:, ::-1].copy()
        if pts is not None:
            pts[:, 0] = width - 1 - pts[:, 0]

    k = int(rng.choice(len(policy.rotations)))
    quarter_turns = policy.rotations[k] // 90
    for _ in range(quarter_turns):
        width = pixels.shape[1]
        pixels = np.rot90(pixels).copy()
        if pts is not None:
            pts = rot90_points(pts, width)

    lo, hi = policy.intensity_range
    factor = rng.uniform(lo, hi)
    if factor != 1.0:
        limit = 255.0 if img.pixels.dtype == np.uint8 else 65535.0
        pixels = np.clip(pixels * factor, 0, limit)

    out = Radiograph(img.id, pixels, score=img.score)
    return out, (None if pts is None else LandmarkSet(pts))


@dataclass
class TrainConfig:
    scheme: int = 1
    k: int = 30  # scheme 1 bag size; spec values 30/40/50
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-3
    momentum: float = 0.9
    fine_tune_extractor: bool = False
    attention_dim: int = 128
    dropout: float = 0.1
    attention_warm_start_scale: float = 0.0  # 0 disables the warm start
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in (1, 2):
            raise ValueError(f"scheme must be 1 or 2, got {self.scheme}")
        for name in ("k", "epochs", "batch_size", "lr", "weight_decay", "attention_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    model: GatedAbmil
    best_state: dict
    final_state: dict
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    val_rmse: float  # standardized units, at the best epoch


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            writer.writerow([row[0], f"{row[1]:.10f}", "" if row[2] is None else f"{row[2]:.10f}"])


def _bag_tensors(bags: Sequence[FeatureBag], standardizer: ScoreStandardizer):
    xs = [torch.as_tensor(b.features, dtype=torch.float32) for b in bags]
    ys = torch.tensor([standardizer.apply(b.score) for b in bags], dtype=torch.float32)
    return xs, ys


def train_abmil(
    train_bags: Sequence[FeatureBag],
    val_bags: Sequence[FeatureBag],
    standardizer: ScoreStandardizer,
    cfg: TrainConfig,
    extractor: Optional[FeatureExtractor] = None,
    train_patch_bags: Optional[Sequence[PatchBag]] = None,
    attention_direction: Optional[np.ndarray] = None,
) -> TrainResult:
    """MSE regression on standardized scores with SGD.

    Frozen mode trains on precomputed FeatureBags. With fine_tune_extractor the
    matching PatchBags must be supplied and gradients flow into the extractor.
    The standardizer must have been fitted on exactly the training bags' ids.
    When attention_warm_start_scale > 0, attention_direction (typically the
    patch classifier's abnormality direction) seeds the attention logits.
    """
    if not train_bags:
        raise ValueError("no training bags")
    expected = split_fingerprint([b.source_id for b in train_bags])
    if standardizer.split_id != expected:
        raise ValueError(
            "standardizer split fingerprint mismatch: it must be fitted on the "
            "training-split scores only"
        )
    fine_tune = cfg.fine_tune_extractor
    if fine_tune and (extractor is None or train_patch_bags is None):
        raise ValueError("fine-tune mode needs the extractor and the raw patch bags")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dim = train_bags[0].features.shape[1]
    model = GatedAbmil(
        dim, cfg.attention_dim, cfg.dropout,
        extractor_id=extractor.extractor_id if extractor is not None else "precomputed",
    )
    if cfg.attention_warm_start_scale > 0:
        if attention_direction is None:
            raise ValueError("attention warm start needs an attention_direction")
        warm_start_attention(model, attention_direction, cfg.attention_warm_start_scale)
    params = list(model.parameters())
    if fine_tune:
        params += list(extractor.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    xs, ys = _bag_tensors(train_bags, standardizer)
    xv, yv = _bag_tensors(val_bags, standardizer) if val_bags else ([], None)
    raw = None
    if fine_tune:
        raw = [
            patches_to_tensor([p.pixels for p in bag.patches], extractor.input_size)
            for bag in train_patch_bags
        ]

    history = []
    best_state, best_val, best_epoch = None, float("inf"), -1
    n = len(train_bags)
    for epoch in range(cfg.epochs):
        model.train()
        if fine_tune:
            extractor.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            losses = []
            for i in idx:
                h = extractor(raw[i]).float() if fine_tune else xs[i]
                pred, _ = model(h)
                losses.append(F.mse_loss(pred, ys[i]))
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite ABMIL loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / n
        val_loss = None
        if yv is not None:
            model.eval()
            with torch.no_grad():
                preds = torch.stack([model(x)[0] for x in xv])
                val_loss = float(F.mse_loss(preds, yv))
            if val_loss < best_val:
                best_val = val_loss
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                best_epoch = epoch
        history.append((epoch, train_loss, val_loss))
    final_state = {k: v.clone() for k, v in model.state_dict().items()}
    if best_state is None:
        best_state, best_epoch = final_state, cfg.epochs - 1
        best_val = history[-1][1]
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        best_state=best_state,
        final_state=final_state,
        history=history,
        best_epoch=best_epoch,
        val_rmse=float(np.sqrt(best_val)),
    )


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple  # GatedAbmil models sharing a standardizer
    member_val_rmse: tuple

    def predict(self, features_per_member) -> float:
        preds = [predict(m, f)[0] for m, f in zip(self.members, features_per_member)]
        return ensemble_predict(preds)


def select_and_ensemble(runs: Sequence[TrainResult], families: Optional[Sequence[str]] = None
                        ) -> EnsembleSpec:
    """Best run per family by validation RMSE; ensemble averages their predictions."""
    runs = list(runs)
    if not runs:
        raise ValueError("no runs to ensemble")
    if families is None:
        families = [str(i) for i in range(len(runs))]
    best: dict[str, TrainResult] = {}
    for fam, run in zip(families, runs):
        if fam not in best or run.val_rmse < best[fam].val_rmse:
            best[fam] = run
    chosen = list(best.values())
    return EnsembleSpec(
        members=tuple(r.model for r in chosen),
        member_val_rmse=tuple(r.val_rmse for r in chosen),
    )
