"""Confusion-matrix metrics and cross-validation aggregation.

All metrics reduce to one integer confusion matrix per evaluation, so scores
are identical whether pixels arrive patch by patch or concatenated. F1 uses
the TP / (TP + (FP + FN) / 2) form per class; the macro mean covers classes
present in the reference or the predictions, and the micro variant collapses
to overall pixel accuracy for single-label pixels.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ConfusionCounts:
    """Rows = reference class, columns = predicted class."""

    matrix: np.ndarray  # (C, C) int64

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.matrix.shape}")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot add confusion counts with different class counts")
        return ConfusionCounts(self.matrix + other.matrix)

    def add_(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot add confusion counts with different class counts")
        self.matrix += other.matrix
        return self


def confusion_counts(
    pred: np.ndarray, label: np.ndarray, num_classes: int, ignore_index: int | None = None
) -> ConfusionCounts:
    """Tally predictions against reference labels (ignored pixels dropped)."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    pred = pred.reshape(-1).astype(np.int64)
    label = label.reshape(-1).astype(np.int64)
    if ignore_index is not None:
        keep = label != ignore_index
        pred, label = pred[keep], label[keep]
    if label.size:
        if label.min() < 0 or label.max() >= num_classes:
            bad = label[(label < 0) | (label >= num_classes)][0]
            raise ValueError(f"label value {bad} outside [0, {num_classes})")
        if pred.min() < 0 or pred.max() >= num_classes:
            bad = pred[(pred < 0) | (pred >= num_classes)][0]
            raise ValueError(f"prediction value {bad} outside [0, {num_classes})")
    flat = label * num_classes + pred
    matrix = np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionCounts(matrix)


def f1_scores(counts: ConfusionCounts):
    """Per-class F1, macro mean, and the presence mask used for the mean.

    Classes absent from both reference and predictions are excluded from the
    macro mean; a 0/0 class inside the mean scores 0.0 with a warning.
    """
    matrix = counts.matrix
    tp = np.diag(matrix).astype(np.float64)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    denom = tp + 0.5 * (fp + fn)
    per_class = np.zeros(counts.num_classes, dtype=np.float64)
    nonzero = denom > 0
    per_class[nonzero] = tp[nonzero] / denom[nonzero]
    present = (matrix.sum(axis=0) + matrix.sum(axis=1)) > 0
    degenerate = ~nonzero
    if present.any() and degenerate.any():
        warnings.warn(
            f"F1 undefined (0/0) for class(es) {np.flatnonzero(degenerate).tolist()}; scoring them 0.0",
            RuntimeWarning,
            stacklevel=2,
        )
    if present.any():
        macro = float(per_class[present].mean())
    else:
        warnings.warn("no classes present; macro F1 set to 0.0", RuntimeWarning, stacklevel=2)
        macro = 0.0
    return per_class, macro, present


def pixel_accuracy(counts: ConfusionCounts) -> float:
    total = counts.total
    if total == 0:
        raise ValueError("pixel accuracy undefined: zero labeled pixels")
    return float(np.trace(counts.matrix) / total)


def micro_f1(counts: ConfusionCounts) -> float:
    """Micro-averaged F1; equals pixel accuracy for single-label pixels."""
    return pixel_accuracy(counts)


@dataclass
class Metrics:
    """Summary of one fold's evaluation."""

    fold: int
    macro_f1: float
    micro_f1: float
    accuracy: float
    per_class_f1: tuple
    support: tuple  # reference pixels per class
    num_pixels: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, fold: int = 0, **extra) -> "Metrics":
        per_class, macro, _ = f1_scores(counts)
        acc = pixel_accuracy(counts)
        return cls(
            fold=fold,
            macro_f1=macro,
            micro_f1=acc,
            accuracy=acc,
            per_class_f1=tuple(float(v) for v in per_class),
            support=tuple(int(v) for v in counts.matrix.sum(axis=1)),
            num_pixels=counts.total,
            extra=dict(extra),
        )

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "accuracy": self.accuracy,
            "per_class_f1": list(self.per_class_f1),
            "support": list(self.support),
            "num_pixels": self.num_pixels,
            **self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Metrics":
        known = {"fold", "macro_f1", "micro_f1", "accuracy", "per_class_f1", "support", "num_pixels"}
        return cls(
            fold=int(data["fold"]),
            macro_f1=float(data["macro_f1"]),
            micro_f1=float(data["micro_f1"]),
            accuracy=float(data["accuracy"]),
            per_class_f1=tuple(data["per_class_f1"]),
            support=tuple(data["support"]),
            num_pixels=int(data["num_pixels"]),
            extra={k: v for k, v in data.items() if k not in known},
        )


def _sample_std(values: np.ndarray) -> float:
    return 0.0 if values.size <= 1 else float(values.std(ddof=1))


def aggregate_cv(fold_metrics) -> dict:
    """Mean and sample standard deviation across folds (n=1 -> std 0.0)."""
    fold_metrics = list(fold_metrics)
    if not fold_metrics:
        raise ValueError("aggregate_cv needs at least one fold")
    f1 = np.array([m.macro_f1 for m in fold_metrics], dtype=np.float64)
    micro = np.array([m.micro_f1 for m in fold_metrics], dtype=np.float64)
    acc = np.array([m.accuracy for m in fold_metrics], dtype=np.float64)
    return {
        "n_folds": len(fold_metrics),
        "mean_f1": float(f1.mean()),
        "std_f1": _sample_std(f1),
        "mean_micro_f1": float(micro.mean()),
        "std_micro_f1": _sample_std(micro),
        "mean_acc": float(acc.mean()),
        "std_acc": _sample_std(acc),
    }


def write_report(fold_metrics, out_dir: str | Path, macro_or_micro: str = "macro") -> Path:
    """Per-fold/per-class CSV plus an aggregate JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fold_metrics = list(fold_metrics)
    csv_path = out_dir / "report.csv"
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "class", "f1", "accuracy", "support"])
        for metrics in fold_metrics:
            for cls_idx, (f1_val, sup) in enumerate(zip(metrics.per_class_f1, metrics.support)):
                writer.writerow([metrics.fold, cls_idx, repr(float(f1_val)), repr(metrics.accuracy), sup])
    tmp.replace(csv_path)

    summary = {**aggregate_cv(fold_metrics), "macro_or_micro": macro_or_micro}
    json_path = out_dir / "summary.json"
    tmp = json_path.with_name(json_path.name + ".tmp")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    tmp.replace(json_path)
    return csv_path


def save_predictions(predictions: dict, out_dir: str | Path, num_classes: int) -> Path:
    """Dump per-patch class maps as single-channel PNGs plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"num_classes": num_classes, "patches": {}}
    for patch_id, class_map in sorted(predictions.items()):
        class_map = np.asarray(class_map)
        if class_map.ndim != 2:
            raise ValueError(f"prediction for {patch_id} must be 2-D, got shape {class_map.shape}")
        name = f"{patch_id}.png"
        Image.fromarray(class_map.astype(np.uint8)).save(out_dir / name, format="PNG")
        index["patches"][patch_id] = name
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out_dir
