"""Sentiment regression metrics: MAE, Pearson correlation, Acc-7, zero-excluded Acc-2, F1."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np


def _pair(preds, labels, min_len: int = 1) -> tuple:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {p.size}")
    return p, y


def mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def pearson_corr(preds, labels) -> float:
    """Sample Pearson coefficient; 0.0 (with a warning) if either side is constant."""
    p, y = _pair(preds, labels, min_len=2)
    pc, yc = p - p.mean(), y - y.mean()
    denom = np.sqrt(np.sum(pc * pc) * np.sum(yc * yc))
    if denom == 0.0:
        warnings.warn("pearson_corr: constant input, correlation defined as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return float(np.clip(np.sum(pc * yc) / denom, -1.0, 1.0))


def to_seven_classes(x) -> np.ndarray:
    """Clamp to [-3, 3] and round half away from zero."""
    c = np.clip(np.asarray(x, dtype=np.float64), -3.0, 3.0)
    return np.sign(c) * np.floor(np.abs(c) + 0.5)


def acc7(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(to_seven_classes(p) == to_seven_classes(y)))


def _binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    tp = np.sum(pred_pos & true_pos)
    fp = np.sum(pred_pos & ~true_pos)
    fn = np.sum(~pred_pos & true_pos)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def acc2_f1(preds, labels, average: str = "binary") -> tuple:
    """Binary accuracy and F1 over samples whose label is non-zero.

    A prediction counts as positive when it is strictly greater than zero.
    ``average="binary"`` scores the positive class; ``"weighted"`` averages
    the per-class F1 by label support.
    """
    p, y = _pair(preds, labels)
    keep = y != 0
    if not keep.any():
        raise ValueError("acc2_f1: every label is zero")
    pred_pos = p[keep] > 0
    true_pos = y[keep] > 0
    acc = float(np.mean(pred_pos == true_pos))
    if average == "binary":
        f1 = _binary_f1(pred_pos, true_pos)
    elif average == "weighted":
        n_pos = true_pos.sum()
        n = true_pos.size
        f1 = float((n_pos * _binary_f1(pred_pos, true_pos)
                    + (n - n_pos) * _binary_f1(~pred_pos, ~true_pos)) / n)
    else:
        raise ValueError(f"unknown F1 average {average!r}")
    return acc, f1


@dataclass
class MetricsReport:
    mae: float
    corr: float
    acc7: float
    acc2: float
    f1: float
    n_total: int
    n_nonzero: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def evaluate_predictions(preds, labels, f1_average: str = "binary") -> MetricsReport:
    p, y = _pair(preds, labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        corr = pearson_corr(p, y) if p.size >= 2 else 0.0
    n_nonzero = int(np.sum(y != 0))
    acc2, f1 = acc2_f1(p, y, f1_average) if n_nonzero else (float("nan"), float("nan"))
    return MetricsReport(mae=mae(p, y), corr=corr, acc7=acc7(p, y), acc2=acc2, f1=f1,
                         n_total=int(p.size), n_nonzero=n_nonzero)
