"""Dual-resolution heatmap-regression model for the 74 dual-hand landmarks.

A compact encoder-decoder emits 74-channel heatmaps at the working resolution
and at half of it; predictions decode each stack's argmax back to image
coordinates and average them. The backbone is deliberately generic; anything
honoring the (74-channel, two-resolution) HeatmapStack contract can replace it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Radiograph
from .joints import (
    HeatmapStack,
    LandmarkSet,
    N_LANDMARKS,
    decode_heatmaps,
    render_target_heatmaps,
)


def _block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class LandmarkNet(nn.Module):
    """U-shaped net with heatmap heads at 1x and 0.5x of the working resolution."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.enc1 = _block(1, base)
        self.enc2 = _block(base, base * 2)
        self.enc3 = _block(base * 2, base * 4)
        self.mid = _block(base * 4, base * 4)
        self.dec2 = _block(base * 4 + base * 4, base * 2)
        self.dec1 = _block(base * 2 + base * 2, base * 2)
        self.head_lo = nn.Conv2d(base * 2, N_LANDMARKS, 1)
        self.dec0 = _block(base * 2 + base, base * 2)
        self.head_hi = nn.Conv2d(base * 2, N_LANDMARKS, 1)
        # bias the sigmoid heads towards the (overwhelmingly background) target
        for head in (self.head_lo, self.head_hi):
            nn.init.constant_(head.bias, -4.0)

    def forward(self, x):
        e1 = self.enc1(x)  # S
        e2 = self.enc2(F.max_pool2d(e1, 2))  # S/2
        e3 = self.enc3(F.max_pool2d(e2, 2))  # S/4
        m = self.mid(F.max_pool2d(e3, 2))  # S/8
        d2 = self.dec2(torch.cat([F.interpolate(m, scale_factor=2), e3], dim=1))  # S/4
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2), e2], dim=1))  # S/2
        lo = torch.sigmoid(self.head_lo(d1))
        d0 = self.dec0(torch.cat([F.interpolate(d1, scale_factor=2), e1], dim=1))  # S
        hi = torch.sigmoid(self.head_hi(d0))
        return hi, lo


@dataclass
class LandmarkTrainConfig:
    work_size: int = 128  # square working resolution fed to the net
    sigma: float = 2.0  # target Gaussian SD in hi-res heatmap pixels
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    peak_weight: float = 100.0  # up-weights near-peak pixels in the squared error
    seed: int = 0


def _square_size(img: Radiograph) -> int:
    return max(img.height, img.width)


def prepare_input(img: Radiograph, work_size: int):
    """Edge-pad to square, resize to the working resolution; returns (tensor, scale)."""
    square = _square_size(img)
    padded = np.pad(
        img.pixels.astype(np.float32),
        ((0, square - img.height), (0, square - img.width)),
        mode="edge",
    )
    resized = cv2.resize(padded, (work_size, work_size), interpolation=cv2.INTER_AREA)
    lo, hi = float(resized.min()), float(resized.max())
    if hi > lo:
        resized = (resized - lo) / (hi - lo)
    scale = square / work_size  # image pixels per hi-res heatmap pixel
    return torch.from_numpy(resized)[None], scale


def train_landmark_model(
    images: Sequence[Radiograph],
    landmark_sets: Sequence[LandmarkSet],
    cfg: LandmarkTrainConfig = LandmarkTrainConfig(),
    model: LandmarkNet | None = None,
):
    """Per-pixel squared-error training against rendered Gaussian targets."""
    if len(images) != len(landmark_sets) or not images:
        raise ValueError("image/landmark count mismatch or empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model or LandmarkNet()
    xs, targets_hi, targets_lo = [], [], []
    size_hi, size_lo = cfg.work_size, cfg.work_size // 2
    for img, lms in zip(images, landmark_sets):
        x, scale = prepare_input(img, cfg.work_size)
        xs.append(x)
        t_hi = render_target_heatmaps(lms, (size_hi, size_hi), cfg.sigma, scale=scale)
        t_lo = render_target_heatmaps(
            lms, (size_lo, size_lo), cfg.sigma / 2.0, scale=scale * 2.0
        )
        targets_hi.append(torch.from_numpy(t_hi.channels.astype(np.float32)))
        targets_lo.append(torch.from_numpy(t_lo.channels.astype(np.float32)))
    x_all = torch.stack(xs)
    hi_all = torch.stack(targets_hi)
    lo_all = torch.stack(targets_lo)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    n = len(images)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            hi, lo = model(x_all[idx])
            # peak-weighted squared error, normalized by the weight mass: plain
            # MSE collapses to the all-zero solution because Gaussian targets
            # are sparse, and an unnormalized mean dilutes the peaks at the
            # higher resolution (4x the pixels for the same peak mass)
            t_hi, t_lo = hi_all[idx], lo_all[idx]
            w_hi = 1 + cfg.peak_weight * t_hi
            w_lo = 1 + cfg.peak_weight * t_lo
            loss = ((hi - t_hi) ** 2 * w_hi).sum() / w_hi.sum() + (
                (lo - t_lo) ** 2 * w_lo
            ).sum() / w_lo.sum()
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite landmark loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / n)
    model.eval()
    return model, history


@torch.no_grad()
def predict_landmarks(model: LandmarkNet, img: Radiograph, work_size: int = 128) -> LandmarkSet:
    model.eval()
    x, scale = prepare_input(img, work_size)
    hi, lo = model(x[None])
    stack_hi = HeatmapStack(hi[0].double().numpy(), scale)
    stack_lo = HeatmapStack(lo[0].double().numpy(), scale * 2.0)
    return decode_heatmaps(stack_hi, stack_lo)


def landmarkwise_errors_mm(
    preds: Sequence[LandmarkSet], truths: Sequence[LandmarkSet], spacings: Sequence[float]
) -> np.ndarray:
    """Per-landmark mean radial error in mm over a set of images (noise-injection SDs)."""
    errs = np.zeros(N_LANDMARKS)
    for pred, truth, spacing in zip(preds, truths, spacings):
        errs += np.hypot(*(pred.points - truth.points).T) * spacing
    return errs / len(list(preds))


def save_landmark_model(model: LandmarkNet, work_size: int, path) -> None:
    torch.save({"kind": "landmark", "work_size": work_size, "state": model.state_dict()}, path)


def load_landmark_model(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "landmark":
        raise ValueError(f"{path} is not a landmark-model checkpoint")
    model = LandmarkNet()
    model.load_state_dict(blob["state"])
    model.eval()
    return model, blob["work_size"]
