"""Thresholding and per-sample segmentation metrics (MA, MDC, MIoU)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import DimensionError

THRESHOLD = 190
PROBABILITY_CUTOFF = THRESHOLD / 255


def threshold_mask(pred: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    """Scale probabilities to [0, 255] (no rounding); >= threshold -> 255, else 0."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.size and (pred.min() < 0 or pred.max() > 1 or not np.isfinite(pred).all()):
        raise ValueError("threshold_mask: probabilities must lie in [0, 1]")
    return np.where(pred * 255.0 >= threshold, 255, 0).astype(np.uint8)


def threshold_scaled(values: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    """Threshold values that are already on the 0-255 scale."""
    values = np.asarray(values, dtype=np.float64)
    return np.where(values >= threshold, 255, 0).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def accuracy(self) -> float:
        return (self.TP + self.TN) / self.total

    def dice(self) -> float:
        denom = 2 * self.TP + self.FP + self.FN
        return 1.0 if denom == 0 else 2 * self.TP / denom

    def iou(self) -> float:
        denom = self.TP + self.FP + self.FN
        return 1.0 if denom == 0 else self.TP / denom


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    values = np.unique(mask)
    if not (np.isin(values, (0, 1)).all() or np.isin(values, (0, 255)).all()):
        raise ValueError(f"{name} is not binary: values {values[:6]}")
    return mask > 0


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Pixel counts; masks may be {0, 1} or {0, 255}."""
    if np.shape(pred) != np.shape(gt):
        raise DimensionError(f"confusion: prediction {np.shape(pred)} vs ground truth {np.shape(gt)}")
    p, g = _as_bool(pred, "prediction"), _as_bool(gt, "ground truth")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


@dataclass
class MetricsReport:
    MA: float
    MDC: float
    MIoU: float
    T: int
    per_sample: list[ConfusionCounts] = field(default_factory=list)

    def as_row(self) -> tuple[float, float, float]:
        return self.MA, self.MDC, self.MIoU


def segmentation_metrics(counts: list[ConfusionCounts]) -> MetricsReport:
    """Means over samples (never a pooled confusion matrix).

    A sample with no foreground in either mask scores Dice = IoU = 1.
    """
    if not counts:
        raise ValueError("segmentation_metrics: need at least one sample")
    T = len(counts)
    ma = sum(c.accuracy() for c in counts) / T
    mdc = sum(c.dice() for c in counts) / T
    miou = sum(c.iou() for c in counts) / T
    return MetricsReport(ma, mdc, miou, T, list(counts))


def evaluate_masks(preds, gts) -> MetricsReport:
    return segmentation_metrics([confusion(p, g) for p, g in zip(preds, gts, strict=True)])


def evaluate_probabilities(probs, gts, threshold: float = THRESHOLD) -> MetricsReport:
    return evaluate_masks([threshold_mask(p, threshold) for p in probs], gts)


def report_csv(reports: dict[tuple[str, int], MetricsReport], path=None) -> str:
    """``split,epoch,MA,MDC,MIoU`` rows sorted by (split, epoch), 6 decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "epoch", "MA", "MDC", "MIoU"])
    for (split, epoch) in sorted(reports):
        r = reports[(split, epoch)]
        w.writerow([split, epoch, f"{r.MA:.6f}", f"{r.MDC:.6f}", f"{r.MIoU:.6f}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_report_csv(path) -> dict[tuple[str, int], tuple[float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["split"], int(r["epoch"])): (float(r["MA"]), float(r["MDC"]), float(r["MIoU"]))
                for r in csv.DictReader(fh)}


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)
