"""Confident-learning label analysis on out-of-fold probabilities.

Per-class thresholds are the mean self-probability of samples carrying that
label. A sample's candidate set is every class whose probability clears its
threshold; the confident joint counts (given label, best candidate) pairs.
Off-diagonal contributors with low self-confidence are flagged as likely
label errors, ranked most-suspicious first.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnalysisError
from .metrics import ConfusionMatrix
from .registry import ClassRegistry


def _check_probs(probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise AnalysisError(f"probabilities must be 2-D, got shape {probs.shape}")
    if len(labels) != probs.shape[0]:
        raise AnalysisError(
            f"{len(labels)} labels for {probs.shape[0]} probability rows")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise AnalysisError("probabilities must be finite and non-negative")
    sums = probs.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-4
    if bad.any():
        i = int(np.argmax(bad))
        raise AnalysisError(f"probability row {i} sums to {sums[i]:.6f}")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= probs.shape[1]):
        raise AnalysisError("label index outside probability columns")
    return probs


def class_thresholds(probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """t_j = mean predicted probability of class j over samples labeled j.

    Classes with no labeled samples get +inf, so they can never enter a
    candidate set.
    """
    probs = _check_probs(probs, labels)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = probs.shape[1]
    out = np.full(num_classes, np.inf, dtype=np.float64)
    for j in range(num_classes):
        mask = labels == j
        if mask.any():
            out[j] = probs[mask, j].mean()
    return out


def confident_joint(probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Counts[given][suggested] over samples with a non-empty candidate set.

    Candidates are classes whose probability meets their threshold; the
    suggestion is the highest-probability candidate, ties to the lower index.
    """
    probs = _check_probs(probs, labels)
    labels = np.asarray(labels, dtype=np.int64)
    thresholds = class_thresholds(probs, labels)
    num_classes = probs.shape[1]
    joint = np.zeros((num_classes, num_classes), dtype=np.int64)
    candidate = probs >= thresholds[None, :]
    masked = np.where(candidate, probs, -np.inf)
    has_candidate = candidate.any(axis=1)
    suggested = np.argmax(masked, axis=1)
    for given, sugg, ok in zip(labels, suggested, has_candidate):
        if ok:
            joint[given, sugg] += 1
    return joint


@dataclass(frozen=True)
class LabelIssue:
    sample_id: str
    given_label: str
    suggested_label: str
    self_confidence: float


def find_label_issues(probs: np.ndarray, labels: Sequence[int],
                      sample_ids: Sequence[str], codes: Sequence[str],
                      threshold: float = 0.1) -> list[LabelIssue]:
    """Off-diagonal confident-joint contributors whose self-confidence
    (probability of the given label) falls below `threshold`, most suspicious
    first."""
    if not 0.0 < threshold <= 1.0:
        raise AnalysisError(f"threshold must be in (0, 1], got {threshold}")
    probs = _check_probs(probs, labels)
    if len(sample_ids) != probs.shape[0]:
        raise AnalysisError(
            f"{len(sample_ids)} sample ids for {probs.shape[0]} rows")
    if len(codes) != probs.shape[1]:
        raise AnalysisError(
            f"{len(codes)} class codes for {probs.shape[1]} columns")
    labels = np.asarray(labels, dtype=np.int64)
    thresholds = class_thresholds(probs, labels)
    candidate = probs >= thresholds[None, :]
    masked = np.where(candidate, probs, -np.inf)
    has_candidate = candidate.any(axis=1)
    suggested = np.argmax(masked, axis=1)

    issues = []
    for i in range(probs.shape[0]):
        if not has_candidate[i] or suggested[i] == labels[i]:
            continue
        self_conf = float(probs[i, labels[i]])
        if self_conf < threshold:
            issues.append(LabelIssue(str(sample_ids[i]), codes[labels[i]],
                                     codes[suggested[i]], self_conf))
    issues.sort(key=lambda it: (it.self_confidence, it.sample_id))
    return issues


def save_label_issues(issues: Sequence[LabelIssue], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "given_label", "suggested_label",
                         "self_confidence"])
        for it in issues:
            writer.writerow([it.sample_id, it.given_label, it.suggested_label,
                             f"{it.self_confidence:.6f}"])
    os.replace(tmp, path)


def load_label_issues(path) -> list[LabelIssue]:
    path = Path(path)
    if not path.is_file():
        raise AnalysisError(f"issues file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["sample_id", "given_label", "suggested_label", "self_confidence"]
        if header != expected:
            raise AnalysisError(f"malformed issues header in {path}: {header}")
        return [LabelIssue(r[0], r[1], r[2], float(r[3])) for r in reader]


def misclassification_matrix(probs: np.ndarray, labels: Sequence[int],
                             registry: ClassRegistry) -> ConfusionMatrix:
    """Confident joint as a given-by-suggested matrix over registry classes."""
    joint = confident_joint(probs, labels)
    if joint.shape[0] != len(registry):
        raise AnalysisError(
            f"{joint.shape[0]} probability columns vs {len(registry)} registry classes")
    return ConfusionMatrix(joint, registry)


def lineage_annotations(matrix: ConfusionMatrix, limit: int = 0) -> list[str]:
    """Readable off-diagonal summary, largest counts first, with each class's
    lineage group alongside to show within-lineage confusions."""
    registry = matrix.registry
    pairs = []
    counts = matrix.counts
    for g in range(len(registry)):
        for s in range(len(registry)):
            if g != s and counts[g, s] > 0:
                pairs.append((int(counts[g, s]), g, s))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    if limit:
        pairs = pairs[:limit]
    lines = []
    for count, g, s in pairs:
        ge, se = registry.entries[g], registry.entries[s]
        marker = "within-lineage" if ge.lineage == se.lineage else "cross-lineage"
        lines.append(f"{ge.code} -> {se.code}: {count} ({ge.lineage.value} -> "
                     f"{se.lineage.value}, {marker})")
    return lines
