"""Out-of-fold evaluation without leakage: each labeled sample is scored only
by models whose training held that sample's fold out. Results are grouped per
architecture or for the full cross-architecture ensemble, and every group
covers every labeled sample exactly once.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .denoise import DenoiseConfig
from .errors import MetricsError
from .images import ImageStore
from .inference import EnsembleSpec, LogitMatrix, ensemble_logits, load_ensemble, predict
from .manifest import Manifest
from .metrics import ConfusionMatrix, MetricReport, compute_metrics, confusion_matrix
from .training import GridEntry

GROUP_MODES = ("architecture", "ensemble")
ENSEMBLE_GROUP = "ensemble"


@dataclass(frozen=True)
class OofResult:
    report: MetricReport
    confusion: ConfusionMatrix
    logits: LogitMatrix
    provenance: Mapping[str, tuple[str, ...]]   # sample id -> checkpoints used


def _score_fold(checkpoint_paths: Sequence[str], records, store,
                tta_k: int, use_ema: bool, average: str, batch_size: int,
                ) -> tuple[list[str], np.ndarray]:
    spec = EnsembleSpec(tuple(str(p) for p in checkpoint_paths), tta_k=tta_k,
                        use_ema=use_ema, average=average, batch_size=batch_size)
    models = load_ensemble(spec)
    ids: list[str] = []
    chunks: list[np.ndarray] = []
    i = 0
    while i < len(records):
        batch = []
        images = []
        shape = None
        while i < len(records) and len(batch) < batch_size:
            img = store.get(records[i])
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                break
            batch.append(records[i])
            images.append(img)
            i += 1
        chunks.append(ensemble_logits(models, np.stack(images), spec))
        ids.extend(r.image_path for r in batch)
    values = (np.concatenate(chunks, axis=0) if chunks
              else np.zeros((0, 0), dtype=np.float64))
    return ids, values


def out_of_fold_eval(entries: Sequence[GridEntry], manifest: Manifest, grid_dir,
                     group_by: str = "ensemble", tta_k: int = 8,
                     denoise_config: DenoiseConfig | None = None,
                     use_ema: bool = True, average: str = "logit",
                     batch_size: int = 32, image_size: int = 0,
                     cache_limit: int = 0) -> dict[str, OofResult]:
    """Evaluate the trained grid out of fold.

    group_by="architecture" scores each backbone alone (its fold-f checkpoint
    on fold-f samples); group_by="ensemble" pools all backbones' fold-f
    checkpoints. Checkpoint paths in `entries` resolve relative to grid_dir.
    """
    if group_by not in GROUP_MODES:
        raise MetricsError(f"group_by must be one of {GROUP_MODES}, got {group_by!r}")
    grid_dir = Path(grid_dir)
    registry = manifest.registry

    labeled = [r for r in manifest.labeled() if r.fold is not None]
    if not labeled:
        raise MetricsError("manifest has no labeled, fold-assigned samples")
    folds = sorted({r.fold for r in labeled})

    cells: dict[tuple[str, int], GridEntry] = {}
    for e in entries:
        key = (e.backbone_id, e.fold)
        if key in cells:
            raise MetricsError(f"duplicate grid entry for {key}")
        cells[key] = e
    arch_ids = list(dict.fromkeys(e.backbone_id for e in entries))
    for arch in arch_ids:
        for fold in folds:
            if (arch, fold) not in cells:
                raise MetricsError(
                    f"grid is missing checkpoint for backbone {arch!r} fold {fold}")

    def resolve(entry: GridEntry) -> str:
        p = Path(entry.checkpoint_path)
        return str(p if p.is_absolute() else grid_dir / p)

    if group_by == "architecture":
        groups = {arch: {fold: [cells[(arch, fold)]] for fold in folds}
                  for arch in arch_ids}
    else:
        groups = {ENSEMBLE_GROUP: {fold: [cells[(arch, fold)] for arch in arch_ids]
                                   for fold in folds}}

    store = ImageStore(manifest, denoise_config, image_size, cache_limit)
    label_of = {r.image_path: r.label for r in labeled}
    results: dict[str, OofResult] = {}
    for group, per_fold in groups.items():
        all_ids: list[str] = []
        all_values: list[np.ndarray] = []
        provenance: dict[str, tuple[str, ...]] = {}
        for fold in folds:
            members = [resolve(e) for e in per_fold[fold]]
            fold_records = [r for r in labeled if r.fold == fold]
            ids, values = _score_fold(members, fold_records, store, tta_k,
                                      use_ema, average, batch_size)
            all_ids.extend(ids)
            all_values.append(values)
            for sid in ids:
                provenance[sid] = tuple(members)
        if sorted(all_ids) != sorted(label_of):
            raise MetricsError(
                f"group {group!r} scored {len(all_ids)} samples, expected "
                f"{len(label_of)} distinct labeled samples")
        matrix = LogitMatrix(tuple(all_ids), registry.codes,
                             np.concatenate(all_values, axis=0),
                             "logit" if average == "logit" else "probability",
                             ).sorted_by_sample()
        preds = predict(matrix)
        y_true = [label_of[p.sample_id] for p in preds]
        y_pred = [p.predicted_class for p in preds]
        cm = confusion_matrix(y_true, y_pred, registry)
        results[group] = OofResult(compute_metrics(cm), cm, matrix,
                                   dict(sorted(provenance.items())))
    return results


def save_provenance(provenance: Mapping[str, tuple[str, ...]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "checkpoints"])
        for sid, paths in provenance.items():
            writer.writerow([sid, ";".join(paths)])
    os.replace(tmp, path)
