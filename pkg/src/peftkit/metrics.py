"""Classification metrics and inference efficiency measurement.

Zero-denominator precision/recall/F1 are defined as 0.  Accuracy is the
confusion-matrix trace over the total; weighted aggregates are support-
weighted means, so weighted recall equals accuracy for single-label tasks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                 # (C, C) int64; rows true, cols predicted
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassReport:
    per_class: list[ClassMetrics]
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float

    def to_dict(self) -> dict:
        return {
            "per_class": [vars(m).copy() for m in self.per_class],
            "accuracy": self.accuracy,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
        }


@dataclass
class EfficiencyReport:
    total_seconds: float
    throughput: float      # images / second
    latency_ms: float      # milliseconds / image
    batch_size: int
    samples: int


def confusion(preds, labels, num_classes: int,
              class_names: tuple[str, ...] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ShapeError(f"preds {preds.shape} vs labels {labels.shape}")
    if preds.size and (preds.min() < 0 or preds.max() >= num_classes
                       or labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"class index outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    if class_names is None:
        class_names = tuple(f"class{i}" for i in range(num_classes))
    return ConfusionMatrix(counts, tuple(class_names))


def weighted_average(values, supports) -> float:
    """Support-weighted mean, the aggregation used for weighted P/R/F1."""
    values = np.asarray(values, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    return float((values * supports).sum() / supports.sum())


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def report(cm: ConfusionMatrix) -> ClassReport:
    counts = cm.counts
    if counts.sum() == 0:
        raise DataError("empty confusion matrix")
    diag = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    per_class = []
    for c in range(cm.num_classes):
        p = diag[c] / col[c] if col[c] > 0 else 0.0
        r = diag[c] / row[c] if row[c] > 0 else 0.0
        per_class.append(ClassMetrics(cm.class_names[c], p, r, f1_score(p, r),
                                      int(row[c])))
    supports = row
    return ClassReport(
        per_class=per_class,
        accuracy=float(diag.sum() / counts.sum()),
        weighted_precision=weighted_average([m.precision for m in per_class], supports),
        weighted_recall=weighted_average([m.recall for m in per_class], supports),
        weighted_f1=weighted_average([m.f1 for m in per_class], supports),
    )


def row_normalize(cm: ConfusionMatrix) -> np.ndarray:
    """Rows scaled to sum to 1; zero-support rows become all-zero rows."""
    counts = cm.counts.astype(np.float64)
    row = counts.sum(axis=1, keepdims=True)
    safe = np.where(row == 0, 1.0, row)
    return np.where(row == 0, 0.0, counts / safe)


def imbalance_table(supports) -> np.ndarray:
    """Per-class support ratio relative to the smallest class."""
    supports = np.asarray(supports, dtype=np.float64)
    if np.any(supports <= 0):
        raise DataError("imbalance ratios need strictly positive supports")
    return supports / supports.min()


def val_test_gap(val_acc: float, test_acc: float) -> float:
    """(validation - test) accuracy in percentage points."""
    return (val_acc - test_acc) * 100.0


def per_source_accuracy(preds, labels, sources: list[str]) -> dict[str, float]:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    out: dict[str, float] = {}
    for tag in sorted(set(sources)):
        mask = np.array([s == tag for s in sources])
        out[tag] = float((preds[mask] == labels[mask]).mean())
    return out


def measure_efficiency(forward_fn, images: np.ndarray,
                       batch_size: int = 32) -> EfficiencyReport:
    """Wall-clock over the full set after one warmup batch; excludes data prep.

    ``forward_fn`` takes an image batch array and returns anything; the model
    must already be in eval mode.
    """
    n = len(images)
    if n == 0:
        raise DataError("cannot measure efficiency on an empty dataset")
    forward_fn(images[:batch_size])  # warmup
    t0 = time.perf_counter()
    for start in range(0, n, batch_size):
        forward_fn(images[start:start + batch_size])
    total = time.perf_counter() - t0
    throughput = n / total
    return EfficiencyReport(total, throughput, 1000.0 / throughput, batch_size, n)


# ---------------------------------------------------------------------------
# serialization per the report schema

def report_to_json(rep: ClassReport, cm: ConfusionMatrix,
                   sources: dict[str, float] | None = None) -> str:
    payload = rep.to_dict()
    payload["confusion"] = cm.counts.tolist()
    payload["sources"] = sources or {}
    return json.dumps(payload, sort_keys=True, indent=2)


def report_to_csv(rep: ClassReport) -> str:
    lines = ["class,precision,recall,f1,support"]
    for m in rep.per_class:
        lines.append(f"{m.name},{m.precision!r},{m.recall!r},{m.f1!r},{m.support}")
    lines.append(f"accuracy,{rep.accuracy!r},,,")
    lines.append(f"weighted,{rep.weighted_precision!r},{rep.weighted_recall!r},"
                 f"{rep.weighted_f1!r},")
    return "\n".join(lines) + "\n"
