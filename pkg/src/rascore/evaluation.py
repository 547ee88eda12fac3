"""Scalar metrics and report generation: PCC, MAE, RMSE, Dice, accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


def _paired(pred: Sequence[float], truth: Sequence[float], min_len: int = 1):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"prediction/truth length mismatch: {p.shape} vs {t.shape}")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} pairs, got {p.size}")
    return p, t


def pcc(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson's correlation coefficient."""
    p, t = _paired(pred, truth, min_len=2)
    dp, dt = p - p.mean(), t - t.mean()
    denom = np.sqrt((dp * dp).sum() * (dt * dt).sum())
    if denom == 0:
        raise ValueError("zero variance in pcc input")
    return float((dp * dt).sum() / denom)


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _paired(pred, truth)
    return float(np.abs(p - t).mean())


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _paired(pred, truth)
    return float(np.sqrt(((p - t) ** 2).mean()))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a&b| / (|a|+|b|); two empty masks score 1.0 by convention."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    confusion: np.ndarray  # rows = truth, columns = predicted
    labels: tuple


def classification_report(pred_labels, truth_labels) -> ClassificationReport:
    pred = list(pred_labels)
    truth = list(truth_labels)
    if len(pred) != len(truth):
        raise ValueError("label list length mismatch")
    labels = tuple(sorted(set(pred) | set(truth)))
    index = {lab: i for i, lab in enumerate(labels)}
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(truth, pred):
        confusion[index[t], index[p]] += 1
    accuracy = float(np.trace(confusion)) / len(truth) if truth else 0.0
    return ClassificationReport(accuracy=accuracy, confusion=confusion, labels=labels)


@dataclass(frozen=True)
class RegressionReport:
    pcc: float
    mae: float
    rmse: float
    n: int
    residuals: np.ndarray
    scatter_path: Optional[Path] = None


def regression_report(pred, truth, scatter_path=None, title="Predicted vs. true score") -> RegressionReport:
    """PCC/MAE/RMSE in score units plus an optional scatter-plot artifact."""
    p, t = _paired(pred, truth, min_len=2)
    path = None
    if scatter_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(t, p, s=12, alpha=0.7)
        lim = [min(t.min(), p.min()), max(t.max(), p.max())]
        ax.plot(lim, lim, "k--", linewidth=1)
        ax.set_xlabel("True score")
        ax.set_ylabel("Predicted score")
        ax.set_title(title)
        fig.tight_layout()
        path = Path(scatter_path)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return RegressionReport(
        pcc=pcc(p, t), mae=mae(p, t), rmse=rmse(p, t), n=p.size, residuals=p - t,
        scatter_path=path,
    )
