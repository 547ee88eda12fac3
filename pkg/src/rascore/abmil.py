"""Gated attention-based MIL: bag aggregation, score regression, attention export.

Attention over a K x d feature bag H:
    a_k = softmax_k( w^T ( tanh(V h_k) * sigmoid(U h_k) ) )
    z   = sum_k a_k h_k,  prediction = regressor(z)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bags import FeatureBag
from .data import ScoreStandardizer
from .geom import Rect


def gated_attention(h: torch.Tensor, v: torch.Tensor, u: torch.Tensor,
                    w: torch.Tensor) -> torch.Tensor:
    """Attention weights for a K x d bag; V, U are L x d, w is L."""
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"expected K x d features, got shape {tuple(h.shape)}")
    if not torch.isfinite(h).all():
        raise ValueError("non-finite features")
    gates = torch.tanh(h @ v.T) * torch.sigmoid(h @ u.T)  # K x L
    scores = gates @ w  # K
    return F.softmax(scores, dim=0)


def aggregate(h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Attention-weighted sum of bag rows."""
    if h.shape[0] != a.shape[0]:
        raise ValueError(f"bag size mismatch: {h.shape[0]} features vs {a.shape[0]} weights")
    return a @ h


class GatedAbmil(nn.Module):
    """Single-head gated ABMIL with a linear regression head."""

    def __init__(self, feature_dim: int, attention_dim: int = 128, dropout: float = 0.1,
                 extractor_id: str = "unknown"):
        super().__init__()
        self.feature_dim = feature_dim
        self.attention_dim = attention_dim
        self.extractor_id = extractor_id
        self.v = nn.Linear(feature_dim, attention_dim, bias=False)
        self.u = nn.Linear(feature_dim, attention_dim, bias=False)
        self.w = nn.Linear(attention_dim, 1, bias=False)
        self.dropout = nn.Dropout(dropout)
        self.regressor = nn.Linear(feature_dim, 1)

    def forward(self, h: torch.Tensor):
        """Returns (standardized prediction, K attention weights)."""
        if h.shape[1] != self.feature_dim:
            raise ValueError(f"feature dim {h.shape[1]} does not match model {self.feature_dim}")
        h = self.dropout(h)
        a = gated_attention(h, self.v.weight, self.u.weight, self.w.weight.squeeze(0))
        z = aggregate(h, a)
        return self.regressor(z).squeeze(-1), a


@torch.no_grad()
def warm_start_attention(model: GatedAbmil, direction, scale: float = 0.25,
                         eps: float = 1e-3) -> None:
    """Initialize the attention to score instances along a feature-space direction.

    With a pure MSE objective on near-count scores, uniform attention is a
    stable optimum (mean pooling already encodes the count), so the attention
    never learns to single out informative instances. Seeding it with a known
    discriminative direction d (tanh branch ~ eps * d . h, gate held at 1/2,
    w rescaled by 2/eps) makes the initial logits equal scale * d . h while
    leaving every parameter free to train.
    """
    d = torch.as_tensor(np.asarray(direction, dtype=np.float64), dtype=model.v.weight.dtype)
    if d.shape != (model.feature_dim,):
        raise ValueError(f"direction must have {model.feature_dim} components, got {tuple(d.shape)}")
    model.v.weight.zero_()
    model.v.weight[0] = eps * d
    model.u.weight.zero_()
    model.w.weight.zero_()
    model.w.weight[0, 0] = 2.0 * scale / eps


@torch.no_grad()
def predict(model: GatedAbmil, features: np.ndarray):
    """Deterministic inference (dropout off): standardized prediction + weights."""
    model.eval()
    h = torch.as_tensor(features, dtype=next(model.parameters()).dtype)
    pred, a = model(h)
    return float(pred), a.numpy()


def ensemble_predict(predictions: Sequence[float]) -> float:
    preds = list(predictions)
    if not preds:
        raise ValueError("cannot ensemble an empty prediction list")
    return float(np.mean(preds))


@dataclass(frozen=True)
class AttentionReport:
    source_id: str
    rects: tuple[Rect, ...]
    weights: np.ndarray
    prediction: float  # score units, de-standardized

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.rects) != w.size:
            raise ValueError("rect/weight count mismatch")
        if w.min() < -1e-12 or abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("attention weights must be a distribution")
        object.__setattr__(self, "weights", w)

    def top_indices(self, n: int) -> list[int]:
        return list(np.argsort(-self.weights)[:n])


def explain(
    model: GatedAbmil,
    bag: FeatureBag,
    standardizer: ScoreStandardizer,
    image: Optional[np.ndarray] = None,
    overlay_path=None,
) -> AttentionReport:
    """Per-patch attention aligned to source rectangles, plus an optional overlay raster."""
    if not bag.rects:
        raise ValueError(f"bag {bag.source_id!r} carries no provenance rects")
    z, weights = predict(model, bag.features)
    report = AttentionReport(
        source_id=bag.source_id,
        rects=bag.rects,
        weights=weights,
        prediction=standardizer.invert(z),
    )
    if overlay_path is not None:
        if image is None:
            raise ValueError("overlay rendering needs the source image")
        render_overlay(image, report, overlay_path)
    return report


def render_overlay(image: np.ndarray, report: AttentionReport, path) -> None:
    """Red fill per rect with opacity proportional to weight (max weight shown at 1)."""
    import cv2

    lo, hi = float(image.min()), float(image.max())
    base = np.zeros_like(image, dtype=np.uint8) if hi == lo else (
        ((image.astype(np.float64) - lo) / (hi - lo)) * 255.0
    ).astype(np.uint8)
    canvas = cv2.cvtColor(base, cv2.COLOR_GRAY2BGR).astype(np.float64)
    h, w = image.shape
    top = float(report.weights.max())
    heat = np.zeros((h, w), dtype=np.float64)
    for rect, weight in zip(report.rects, report.weights):
        c = rect.clipped(w, h)
        if c.area:
            region = heat[c.y : c.y + c.h, c.x : c.x + c.w]
            np.maximum(region, weight / top if top > 0 else 0.0, out=region)
    canvas[..., 2] = canvas[..., 2] * (1 - 0.6 * heat) + 255.0 * 0.6 * heat
    canvas[..., 0] *= 1 - 0.6 * heat
    canvas[..., 1] *= 1 - 0.6 * heat
    cv2.imwrite(str(path), canvas.astype(np.uint8))


def save_report(report: AttentionReport, path) -> None:
    lines = [f"# id={report.source_id} prediction={float(report.prediction)!r}", "x,y,w,h,weight"]
    for rect, weight in zip(report.rects, report.weights):
        lines.append(f"{rect.x},{rect.y},{rect.w},{rect.h},{float(weight)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(path) -> AttentionReport:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split())
    rects, weights = [], []
    for line in lines[2:]:
        x, y, w, h, wt = line.split(",")
        rects.append(Rect(int(x), int(y), int(w), int(h)))
        weights.append(float(wt))
    return AttentionReport(
        source_id=header["id"], rects=tuple(rects), weights=np.array(weights),
        prediction=float(header["prediction"]),
    )


def save_checkpoint(model: GatedAbmil, standardizer: ScoreStandardizer, path) -> None:
    torch.save(
        {
            "kind": "abmil",
            "feature_dim": model.feature_dim,
            "attention_dim": model.attention_dim,
            "dropout": model.dropout.p,
            "extractor_id": model.extractor_id,
            "state": model.state_dict(),
            "standardizer": {
                "mean": standardizer.mean,
                "sd": standardizer.sd,
                "split_id": standardizer.split_id,
            },
        },
        path,
    )


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "abmil":
        raise ValueError(f"{path} is not an ABMIL checkpoint")
    model = GatedAbmil(
        blob["feature_dim"], blob["attention_dim"], blob["dropout"], blob["extractor_id"]
    )
    model.load_state_dict(blob["state"])
    model.eval()
    std = ScoreStandardizer(**blob["standardizer"])
    return model, std
