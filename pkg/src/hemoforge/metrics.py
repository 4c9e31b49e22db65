"""Confusion matrices and macro classification metrics.

Rows of the confusion matrix are true classes, columns predicted, both in
registry order. Macro metrics are unweighted means over classes with nonzero
support; zero-support classes are excluded and listed in the report. A class
whose precision/recall/F1 denominator is zero (but whose support is not)
scores 0 for that metric rather than being dropped.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MetricsError
from .registry import ClassRegistry


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray            # CxC int64, rows true, cols predicted
    registry: ClassRegistry

    def __post_init__(self):
        c = len(self.registry)
        if self.counts.shape != (c, c):
            raise MetricsError(f"counts shape {self.counts.shape} does not match registry size {c}")
        if (self.counts < 0).any():
            raise MetricsError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + list(self.registry.codes))
            for i, code in enumerate(self.registry.codes):
                writer.writerow([code] + [int(v) for v in self.counts[i]])
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path, registry: ClassRegistry) -> "ConfusionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0][1:]) != registry.codes:
            raise MetricsError(f"confusion matrix header in {path} does not match registry")
        counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
        return cls(counts, registry)


def confusion_matrix(y_true: Sequence[str], y_pred: Sequence[str],
                     registry: ClassRegistry) -> ConfusionMatrix:
    if len(y_true) != len(y_pred):
        raise MetricsError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    c = len(registry)
    counts = np.zeros((c, c), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        counts[registry.index(t), registry.index(p)] += 1
    return ConfusionMatrix(counts, registry)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int


@dataclass(frozen=True)
class MetricReport:
    macro_f1: float
    balanced_accuracy: float
    macro_precision: float
    macro_sensitivity: float
    macro_specificity: float
    micro_accuracy: float
    per_class: dict[str, ClassMetrics]
    excluded: tuple[str, ...]

    def to_text(self) -> str:
        lines = [
            f"macro_f1 = {self.macro_f1:.6f}",
            f"balanced_accuracy = {self.balanced_accuracy:.6f}",
            f"macro_precision = {self.macro_precision:.6f}",
            f"macro_sensitivity = {self.macro_sensitivity:.6f}",
            f"macro_specificity = {self.macro_specificity:.6f}",
            f"micro_accuracy = {self.micro_accuracy:.6f}",
            f"excluded_classes = {','.join(self.excluded) if self.excluded else '-'}",
            "",
            "class,precision,recall,f1,specificity,support",
        ]
        for code, m in self.per_class.items():
            lines.append(f"{code},{m.precision:.6f},{m.recall:.6f},{m.f1:.6f},"
                         f"{m.specificity:.6f},{m.support}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def compute_metrics(cm: ConfusionMatrix, exclude: set[str] | None = None) -> MetricReport:
    """Per-class and macro metrics from a confusion matrix.

    `exclude` adds classes to the automatic zero-support exclusion; excluded
    classes never enter the macro averages.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise MetricsError("cannot compute metrics on an empty confusion matrix")
    codes = cm.registry.codes
    support = counts.sum(axis=1)
    excluded = {c for i, c in enumerate(codes) if support[i] == 0}
    if exclude:
        excluded |= set(exclude)

    per_class: dict[str, ClassMetrics] = {}
    included_rows = []
    for i, code in enumerate(codes):
        tp = counts[i, i]
        fp = counts[:, i].sum() - tp
        fn = support[i] - tp
        tn = total - tp - fp - fn
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        specificity = _safe_div(tn, tn + fp)
        f1 = _safe_div(2.0 * precision * recall, precision + recall)
        per_class[code] = ClassMetrics(precision, recall, f1, specificity, int(support[i]))
        if code not in excluded:
            included_rows.append((precision, recall, f1, specificity))
    if not included_rows:
        raise MetricsError("every class is excluded; nothing to average")
    arr = np.array(included_rows)
    return MetricReport(
        macro_f1=float(arr[:, 2].mean()),
        balanced_accuracy=float(arr[:, 1].mean()),
        macro_precision=float(arr[:, 0].mean()),
        macro_sensitivity=float(arr[:, 1].mean()),
        macro_specificity=float(arr[:, 3].mean()),
        micro_accuracy=float(np.trace(cm.counts) / total),
        per_class=per_class,
        excluded=tuple(sorted(excluded)),
    )
