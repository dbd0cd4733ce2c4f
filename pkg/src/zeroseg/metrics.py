"""Confusion-matrix accumulation, per-class IoU, seen/unseen mIoU, and the
harmonic mean used to summarize generalized zero-shot performance.

Background (class index 0) never enters the seen or unseen aggregates.
Classes absent from both prediction and ground truth are excluded from
means rather than scored 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import model
from ._fileio import atomic_write_text
from .embeddings import EmbeddingTable, SplitSpec
from .numerics import ParamSet, ShapeError

__all__ = [
    "ConfusionMatrix",
    "MetricsReport",
    "iou_per_class",
    "miou",
    "harmonic_mean",
    "evaluate",
    "unseen_prediction_rate",
    "write_metrics_csv",
]


class ConfusionMatrix:
    """counts[g, p] = number of pixels with ground truth g predicted p."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (n_classes, n_classes):
                raise ShapeError(f"counts must be {n_classes} x {n_classes}")
        self.counts = counts

    def accumulate(self, predicted: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        predicted = np.asarray(predicted).astype(np.int64)
        truth = np.asarray(truth).astype(np.int64)
        if predicted.shape != truth.shape:
            raise ShapeError(f"mask shapes differ: {predicted.shape} vs {truth.shape}")
        if predicted.size == 0:
            return self
        for name, arr in (("predicted", predicted), ("truth", truth)):
            if arr.min() < 0 or arr.max() >= self.n_classes:
                raise ValueError(f"{name} mask has labels outside [0, {self.n_classes})")
        flat = self.n_classes * truth.reshape(-1) + predicted.reshape(-1)
        self.counts += np.bincount(flat, minlength=self.n_classes**2).reshape(
            self.n_classes, self.n_classes
        )
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ShapeError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN marks classes absent from both sides."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    out = np.full(cm.n_classes, np.nan)
    present = denom > 0
    out[present] = tp[present] / denom[present]
    return out


def miou(ious: np.ndarray, class_indices: Iterable[int]) -> float:
    """Mean IoU over the present classes of a set, background excluded.

    Returns NaN when no class of the set is present.
    """
    indices = sorted(set(int(c) for c in class_indices) - {0})
    if not indices:
        raise ValueError("class set must contain at least one non-background class")
    vals = np.asarray(ious, dtype=np.float64)[indices]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def harmonic_mean(seen: float, unseen: float) -> float:
    """2su / (s + u); zero when both sides are zero."""
    if np.isnan(seen) or np.isnan(unseen):
        return float("nan")
    if seen < 0 or unseen < 0:
        raise ValueError("harmonic_mean inputs must be nonnegative")
    if seen + unseen == 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


@dataclass
class MetricsReport:
    class_names: tuple[str, ...]
    iou: np.ndarray
    seen_miou: float
    unseen_miou: float
    harmonic: float
    gt_pixels: np.ndarray
    confusion: ConfusionMatrix
    split: SplitSpec

    @classmethod
    def from_confusion(
        cls, cm: ConfusionMatrix, class_names: Sequence[str], split: SplitSpec
    ) -> "MetricsReport":
        ious = iou_per_class(cm)
        seen = miou(ious, split.seen)
        unseen = miou(ious, split.unseen)
        return cls(
            class_names=tuple(class_names),
            iou=ious,
            seen_miou=seen,
            unseen_miou=unseen,
            harmonic=harmonic_mean(seen, unseen),
            gt_pixels=cm.counts.sum(axis=1),
            confusion=cm,
            split=split,
        )


def evaluate(
    params: ParamSet,
    dataset,
    table: EmbeddingTable,
    split: SplitSpec,
    mode: str = "generalized",
) -> MetricsReport:
    """Run inference over a dataset and score it against evaluation masks."""
    cm = ConfusionMatrix(len(table))
    for i in range(len(dataset)):
        probs = model.infer_probs(params, dataset.image(i), table)
        pred = model.predict(probs, mode, split)
        cm.accumulate(pred, dataset.evaluation_mask(i))
    return MetricsReport.from_confusion(cm, table.class_names, split)


def unseen_prediction_rate(cm: ConfusionMatrix, split: SplitSpec) -> float:
    """Fraction of ground-truth object pixels predicted as any unseen class."""
    unseen = sorted(split.unseen)
    object_rows = cm.counts[1:, :]
    total = object_rows.sum()
    if total == 0:
        return 0.0
    return float(object_rows[:, unseen].sum() / total)


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else f"{x:.6f}"


def write_metrics_csv(report: MetricsReport, path: str | Path, mode: str = "generalized") -> None:
    """Rows of class_name,iou followed by the aggregate rows.

    Conventional mode restricts the file to unseen-class IoUs and their mean.
    """
    rows: list[tuple[str, str]] = []
    if mode == "generalized":
        for i, name in enumerate(report.class_names):
            rows.append((name, _fmt(report.iou[i])))
        rows.append(("seen_miou", _fmt(report.seen_miou)))
        rows.append(("unseen_miou", _fmt(report.unseen_miou)))
        rows.append(("harmonic_mean", _fmt(report.harmonic)))
    elif mode == "conventional":
        for i in report.split.unseen_sorted:
            rows.append((report.class_names[i], _fmt(report.iou[i])))
        rows.append(("unseen_miou", _fmt(report.unseen_miou)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, "".join(f"{a},{b}\n" for a, b in rows))
