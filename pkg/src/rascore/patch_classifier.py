"""Patch classifiers (3-class for tiling, binary for joint patches) and their
truncation into fixed-dimension feature extractors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bags import FeatureBag, PatchBag
from .joints import resize_nearest

# backbone id -> penultimate feature dimension (None = configurable)
BACKBONE_DIMS = {
    "small-conv": None,
    "mobile-v2-class": 1280,
    "res-34-class": 512,
    "res-50-class": 2048,
}


class SmallConv(nn.Module):
    """Tiny convolutional backbone for desk-scale runs; no pretrained weights needed.

    Features concatenate global average and max pooling so small localized
    structures (lesion-sized blobs) survive the spatial reduction.
    """

    def __init__(self, feature_dim: int = 64):
        super().__init__()
        if feature_dim % 2:
            raise ValueError("small-conv feature dim must be even (avg+max halves)")
        self.feature_dim = feature_dim
        widths = (16, 32, feature_dim // 2)
        layers = []
        in_ch = 1
        for width in widths:
            layers += [nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            in_ch = width
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        fmap = self.body(x)
        avg = fmap.mean(dim=(2, 3))
        peak = fmap.amax(dim=(2, 3))
        return torch.cat([avg, peak], dim=1)


def _torchvision_backbone(backbone_id: str, pretrained: bool):
    try:
        import torchvision.models as tvm
    except ImportError as exc:
        raise RuntimeError(f"backbone {backbone_id!r} needs torchvision installed") from exc
    weights = "DEFAULT" if pretrained else None
    if backbone_id == "mobile-v2-class":
        net = tvm.mobilenet_v2(weights=weights)
        body = nn.Sequential(net.features, nn.AdaptiveAvgPool2d(1), nn.Flatten(1))
    elif backbone_id == "res-34-class":
        net = tvm.resnet34(weights=weights)
        body = nn.Sequential(*list(net.children())[:-1], nn.Flatten(1))
    elif backbone_id == "res-50-class":
        net = tvm.resnet50(weights=weights)
        body = nn.Sequential(*list(net.children())[:-1], nn.Flatten(1))
    else:
        raise ValueError(f"unknown backbone {backbone_id!r}")

    class _GrayWrapper(nn.Module):
        # radiographs are single channel; torchvision stems expect 3
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            return self.inner(x.expand(-1, 3, -1, -1))

    return _GrayWrapper(body)


class PatchClassifier(nn.Module):
    """Backbone + linear head; `features` is the penultimate activation."""

    def __init__(
        self,
        backbone_id: str = "small-conv",
        n_classes: int = 3,
        feature_dim: Optional[int] = None,
        input_size: int = 224,
        pretrained: bool = False,
        norm_mean: float = 0.0,
        norm_sd: float = 1.0,
    ):
        super().__init__()
        if backbone_id not in BACKBONE_DIMS:
            raise ValueError(f"unknown backbone {backbone_id!r}")
        fixed = BACKBONE_DIMS[backbone_id]
        if fixed is not None:
            if feature_dim is not None and feature_dim != fixed:
                raise ValueError(f"{backbone_id} has feature dim {fixed}, not {feature_dim}")
            feature_dim = fixed
            self.backbone = _torchvision_backbone(backbone_id, pretrained)
        else:
            feature_dim = feature_dim or 64
            self.backbone = SmallConv(feature_dim)
        self.backbone_id = backbone_id
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.input_size = input_size
        self.norm_mean = norm_mean
        self.norm_sd = norm_sd
        self.head = nn.Linear(feature_dim, n_classes)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.norm_mean) / self.norm_sd

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.normalize(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def class_probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(x), dim=1)


class FeatureExtractor(nn.Module):
    """A classifier truncated before its final linear layer."""

    def __init__(self, classifier: PatchClassifier):
        super().__init__()
        self.classifier = classifier
        self.output_dim = classifier.feature_dim
        self.extractor_id = f"{classifier.backbone_id}-d{classifier.feature_dim}"

    @property
    def input_size(self) -> int:
        return self.classifier.input_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier.features(x)


def truncate_to_feature_extractor(classifier: PatchClassifier) -> FeatureExtractor:
    return FeatureExtractor(classifier)


def abnormality_direction(classifier: PatchClassifier, abnormal_class: int = 1) -> np.ndarray:
    """Feature-space direction whose projection is the abnormal-class logit margin."""
    head = classifier.head.weight.detach().numpy().astype(np.float64)
    return head[abnormal_class] - head.mean(axis=0)


def patches_to_tensor(patches: Sequence[np.ndarray], input_size: int) -> torch.Tensor:
    resized = [
        p if p.shape == (input_size, input_size) else resize_nearest(p, input_size)
        for p in patches
    ]
    arr = np.stack(resized).astype(np.float32)
    return torch.from_numpy(arr).unsqueeze(1)


@dataclass
class PCTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-3
    momentum: float = 0.9
    seed: int = 0


@dataclass
class PCHistory:
    train_loss: list
    train_acc: list
    val_acc: list
    best_epoch: int


def train_patch_classifier(
    train_patches: Sequence[np.ndarray],
    train_labels: Sequence[int],
    classifier: PatchClassifier,
    cfg: PCTrainConfig = PCTrainConfig(),
    val_patches: Sequence[np.ndarray] = (),
    val_labels: Sequence[int] = (),
):
    """SGD + cross-entropy training; returns (best-val classifier, history).

    Keeps the best-validation-accuracy weights (final weights when no validation
    data is given) and records per-epoch train/val accuracy.
    """
    labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_patches) != labels.size or labels.size == 0:
        raise ValueError("patch/label count mismatch or empty training set")
    if np.unique(labels).size < 2:
        raise ValueError("patch classifier training needs at least 2 classes")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    x = patches_to_tensor(train_patches, classifier.input_size)
    y = torch.from_numpy(labels)
    # normalization constants come from the training set
    classifier.norm_mean = float(x.mean())
    classifier.norm_sd = float(x.std()) or 1.0
    xv = patches_to_tensor(val_patches, classifier.input_size) if len(val_patches) else None
    yv = torch.as_tensor(np.asarray(val_labels, dtype=np.int64)) if len(val_labels) else None

    opt = torch.optim.SGD(
        classifier.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    # inverse-frequency class weights: weak labels are heavily imbalanced
    counts = np.bincount(labels, minlength=classifier.n_classes).astype(np.float64)
    weights = torch.as_tensor(
        np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / classifier.n_classes, 0.0),
        dtype=torch.float32,
    )
    history = PCHistory([], [], [], best_epoch=-1)
    best_state, best_val = None, -1.0
    n = labels.size
    for epoch in range(cfg.epochs):
        classifier.train()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            opt.zero_grad()
            logits = classifier(xb)
            loss = F.cross_entropy(logits, yb, weight=weights)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        history.train_loss.append(total_loss / n)
        history.train_acc.append(correct / n)
        if xv is not None:
            classifier.eval()
            with torch.no_grad():
                val_acc = float((classifier(xv).argmax(1) == yv).float().mean())
            history.val_acc.append(val_acc)
            if val_acc >= best_val:
                best_val = val_acc
                best_state = {k: v.clone() for k, v in classifier.state_dict().items()}
                history.best_epoch = epoch
    if best_state is not None:
        classifier.load_state_dict(best_state)
    classifier.eval()
    return classifier, history


@torch.no_grad()
def classify_patches(classifier: PatchClassifier, patches: Sequence[np.ndarray],
                     batch_size: int = 256) -> np.ndarray:
    """Softmax class probabilities, deterministic in eval mode."""
    classifier.eval()
    x = patches_to_tensor(patches, classifier.input_size)
    out = [classifier.class_probs(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy().astype(np.float64)


@torch.no_grad()
def extract_features(fe: FeatureExtractor, bag: PatchBag, batch_size: int = 256) -> FeatureBag:
    """K x d embeddings in bag order."""
    if len(bag) == 0:
        raise ValueError("empty bag")
    fe.eval()
    x = patches_to_tensor([p.pixels for p in bag.patches], fe.input_size)
    out = [fe(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    feats = torch.cat(out).numpy().astype(np.float64)
    return FeatureBag(
        source_id=bag.source_id,
        features=feats,
        rects=tuple(p.rect for p in bag.patches),
        score=bag.score,
    )


def save_classifier(classifier: PatchClassifier, path) -> None:
    torch.save(
        {
            "kind": "patch-classifier",
            "backbone_id": classifier.backbone_id,
            "n_classes": classifier.n_classes,
            "feature_dim": classifier.feature_dim,
            "input_size": classifier.input_size,
            "norm_mean": classifier.norm_mean,
            "norm_sd": classifier.norm_sd,
            "state": classifier.state_dict(),
        },
        path,
    )


def load_classifier(path) -> PatchClassifier:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "patch-classifier":
        raise ValueError(f"{path} is not a patch-classifier checkpoint")
    clf = PatchClassifier(
        backbone_id=blob["backbone_id"],
        n_classes=blob["n_classes"],
        feature_dim=blob["feature_dim"],
        input_size=blob["input_size"],
        norm_mean=blob["norm_mean"],
        norm_sd=blob["norm_sd"],
    )
    clf.load_state_dict(blob["state"])
    clf.eval()
    return clf
