"""Synthetic desk-scale datasets: per-class hued blob images with a class-
dependent blob radius, so both color and geometry carry the label. Images are
kept in the mid intensity range so additive noise never clips.

Optionally flips a fraction of labels through a row-stochastic confusion
matrix; the flipped assignments are recorded so label-noise analysis can be
checked against ground truth.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError
from .manifest import Manifest, SampleRecord, Source, assign_stratified_folds
from .registry import ClassRegistry, default_registry


def flip_labels(labels: Sequence[int], flip_matrix: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Resample each label through a row-stochastic flip matrix."""
    q = np.asarray(flip_matrix, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ManifestError(f"flip matrix must be square, got shape {q.shape}")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-6):
        raise ManifestError("flip matrix rows must be non-negative and sum to 1")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= q.shape[0]):
        raise ManifestError("label index outside flip matrix")
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        out[i] = rng.choice(q.shape[0], p=q[lab])
    return out


def uniform_flip_matrix(num_classes: int, flip_rate: float) -> np.ndarray:
    """Keep a label with probability 1 - flip_rate, otherwise move uniformly
    to one of the other classes."""
    if not 0.0 <= flip_rate < 1.0:
        raise ManifestError(f"flip_rate must be in [0, 1), got {flip_rate}")
    if num_classes < 2:
        raise ManifestError(f"need at least 2 classes, got {num_classes}")
    off = flip_rate / (num_classes - 1)
    q = np.full((num_classes, num_classes), off, dtype=np.float64)
    np.fill_diagonal(q, 1.0 - flip_rate)
    return q


def _class_style(index: int, num_classes: int, image_size: int):
    hue = index / num_classes
    bg = np.array(colorsys.hsv_to_rgb(hue, 0.15, 0.55)) * 255.0
    fg = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.80)) * 255.0
    core = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.7, 0.35)) * 255.0
    radius = image_size * (0.12 + 0.20 * index / max(1, num_classes - 1))
    return bg, fg, core, radius


def _render(index: int, num_classes: int, image_size: int,
            rng: np.random.Generator) -> np.ndarray:
    bg, fg, core, radius = _class_style(index, num_classes, image_size)
    img = np.empty((image_size, image_size, 3), dtype=np.float64)
    img[:] = bg
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cy = image_size / 2 + rng.uniform(-2.0, 2.0)
    cx = image_size / 2 + rng.uniform(-2.0, 2.0)
    r = radius + rng.uniform(-1.0, 1.0)
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    img[dist2 <= r * r] = fg
    img[dist2 <= (0.45 * r) ** 2] = core
    img += rng.normal(0.0, 3.0, size=img.shape)
    return np.clip(np.rint(img), 10, 245).astype(np.uint8)


@dataclass(frozen=True)
class SynthResult:
    manifest: Manifest
    manifest_path: Path
    flips_path: Path | None
    true_labels: Mapping[str, str]     # sample id -> true class code


def synth_dataset(out_dir, counts: Mapping[str, int] | Sequence[int],
                  registry: ClassRegistry | None = None, image_size: int = 48,
                  seed: int = 11, flip_rate: float = 0.0,
                  flip_matrix: np.ndarray | None = None, folds: int = 0,
                  ) -> SynthResult:
    """Write a synthetic imagefolder tree, its manifest, and (if labels were
    flipped) a flips.csv mapping each flipped path to its true label.

    Images live under out_dir/images/<true class>/ so pixels always reflect
    the true class; the manifest carries the possibly-flipped given label.
    """
    registry = registry or default_registry()
    if isinstance(counts, Mapping):
        unknown = sorted(set(counts) - set(registry.codes))
        if unknown:
            raise ManifestError(f"count for unknown class {unknown[0]!r}")
        count_list = [int(counts.get(code, 0)) for code in registry.codes]
    else:
        if len(counts) != len(registry):
            raise ManifestError(
                f"{len(counts)} counts for {len(registry)} classes")
        count_list = [int(c) for c in counts]
    if any(c < 0 for c in count_list):
        raise ManifestError("class counts must be non-negative")
    if sum(count_list) == 0:
        raise ManifestError("synthetic dataset needs at least one sample")

    out_dir = Path(out_dir)
    paths: list[str] = []
    true_indices: list[int] = []
    for index, code in enumerate(registry.codes):
        class_dir = out_dir / "images" / code
        if count_list[index]:
            class_dir.mkdir(parents=True, exist_ok=True)
        for n in range(count_list[index]):
            rng = np.random.default_rng([seed, index, n])
            arr = _render(index, len(registry), image_size, rng)
            rel = f"images/{code}/{code}_{n:04d}.png"
            Image.fromarray(arr).save(out_dir / rel)
            paths.append(rel)
            true_indices.append(index)

    if flip_matrix is None and flip_rate > 0.0:
        flip_matrix = uniform_flip_matrix(len(registry), flip_rate)
    if flip_matrix is not None:
        flip_rng = np.random.default_rng([seed, 999])
        given_indices = flip_labels(true_indices, flip_matrix, flip_rng)
    else:
        given_indices = np.asarray(true_indices, dtype=np.int64)

    records = [
        SampleRecord(image_path=path, label=registry.codes[g],
                     source=Source.WBCBENCH_TRAIN)
        for path, g in zip(paths, given_indices)
    ]
    provenance = "\n".join(
        f"synthetic class {code}: {count_list[i]} images"
        for i, code in enumerate(registry.codes) if count_list[i]
    ) + f"\nseed {seed}, image_size {image_size}, flip_rate {flip_rate}"
    manifest = Manifest(records, registry, provenance=provenance, base_dir=out_dir)
    if folds:
        manifest = assign_stratified_folds(manifest, folds, seed)
    manifest_path = out_dir / "manifest.csv"
    manifest.save(manifest_path)

    true_labels = {p: registry.codes[t] for p, t in zip(paths, true_indices)}
    flips_path = None
    flipped = [(p, t, g) for p, t, g in zip(paths, true_indices, given_indices)
               if t != g]
    if flip_matrix is not None:
        flips_path = out_dir / "flips.csv"
        with open(flips_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_path", "true_label", "given_label"])
            for p, t, g in flipped:
                writer.writerow([p, registry.codes[t], registry.codes[g]])
    return SynthResult(manifest, manifest_path, flips_path, true_labels)


def load_flips(path) -> dict[str, tuple[str, str]]:
    """flips.csv rows as {image_path: (true_label, given_label)}."""
    path = Path(path)
    out: dict[str, tuple[str, str]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_path", "true_label", "given_label"]:
            raise ManifestError(f"malformed flips header in {path}: {header}")
        for row in reader:
            out[row[0]] = (row[1], row[2])
    return out
