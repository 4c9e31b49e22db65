"""Ensemble inference: per-model test-time augmentation over the exact
dihedral views, logit averaging across checkpoints in float64, argmax
prediction with tie flagging, and a resumable dataset scorer that tolerates
a small fraction of unreadable images.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import dihedral
from .denoise import DenoiseConfig
from .errors import InferenceError
from .images import ImageStore
from .manifest import Manifest
from .models import WbcClassifier
from .training import Checkpoint

KINDS = ("logit", "probability")
_PREFIX = {"logit": "logit_", "probability": "prob_"}


@dataclass(frozen=True)
class LogitMatrix:
    """N-by-C scores for named samples, either raw logits or probabilities."""

    sample_ids: tuple[str, ...]
    codes: tuple[str, ...]
    values: np.ndarray
    kind: str = "logit"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InferenceError(f"kind must be one of {KINDS}, got {self.kind!r}")
        v = self.values
        if v.ndim != 2 or v.shape != (len(self.sample_ids), len(self.codes)):
            raise InferenceError(
                f"values shape {v.shape} does not match {len(self.sample_ids)} "
                f"samples x {len(self.codes)} classes")
        if not np.all(np.isfinite(v)):
            raise InferenceError("scores contain non-finite values")
        if self.kind == "probability":
            if np.any(v < 0) or np.any(v > 1):
                raise InferenceError("probabilities outside [0, 1]")
            sums = v.sum(axis=1)
            bad = np.abs(sums - 1.0) > 1e-5
            if bad.any():
                i = int(np.argmax(bad))
                raise InferenceError(
                    f"probability row {self.sample_ids[i]!r} sums to {sums[i]:.7f}")

    def softmax(self) -> "LogitMatrix":
        if self.kind == "probability":
            return self
        shifted = self.values - self.values.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return LogitMatrix(self.sample_ids, self.codes,
                           e / e.sum(axis=1, keepdims=True), kind="probability")

    def sorted_by_sample(self) -> "LogitMatrix":
        order = np.argsort(np.array(self.sample_ids, dtype=object), kind="stable")
        ids = tuple(self.sample_ids[i] for i in order)
        return LogitMatrix(ids, self.codes, self.values[order], self.kind)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        prefix = _PREFIX[self.kind]
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id"] + [prefix + c for c in self.codes])
            for sid, row in zip(self.sample_ids, self.values):
                writer.writerow([sid] + [f"{v:.10g}" for v in row])
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, codes: Sequence[str] | None = None) -> "LogitMatrix":
        path = Path(path)
        if not path.is_file():
            raise InferenceError(f"score file not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "sample_id" or len(header) < 2:
                raise InferenceError(f"malformed score header in {path}: {header}")
            kind = next((k for k, p in _PREFIX.items()
                         if all(col.startswith(p) for col in header[1:])), None)
            if kind is None:
                raise InferenceError(f"score columns must share a logit_/prob_ "
                                     f"prefix in {path}")
            file_codes = tuple(col[len(_PREFIX[kind]):] for col in header[1:])
            if codes is not None and tuple(codes) != file_codes:
                raise InferenceError(
                    f"score columns {file_codes} do not match expected "
                    f"{tuple(codes)} in {path}")
            ids: list[str] = []
            rows: list[list[float]] = []
            for row in reader:
                if len(row) != len(header):
                    raise InferenceError(f"malformed score row in {path}: {row!r}")
                ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
        values = (np.array(rows, dtype=np.float64) if rows
                  else np.zeros((0, len(file_codes)), dtype=np.float64))
        return cls(tuple(ids), file_codes, values, kind)


@dataclass(frozen=True)
class EnsembleSpec:
    checkpoint_paths: tuple[str, ...]
    tta_k: int = 8
    use_ema: bool = True
    average: str = "logit"
    batch_size: int = 32

    def __post_init__(self):
        if not self.checkpoint_paths:
            raise InferenceError("ensemble needs at least one checkpoint")
        if self.tta_k < 1:
            raise InferenceError(f"tta_k must be >= 1, got {self.tta_k}")
        if self.average not in KINDS:
            raise InferenceError(
                f"average must be one of {KINDS}, got {self.average!r}")
        if self.batch_size < 1:
            raise InferenceError(f"batch_size must be >= 1, got {self.batch_size}")


def load_ensemble(spec: EnsembleSpec) -> list[WbcClassifier]:
    models = []
    for p in spec.checkpoint_paths:
        if not Path(p).is_file():
            raise InferenceError(f"ensemble checkpoint missing: {p}")
        models.append(Checkpoint.load(p).build(use_ema=spec.use_ema))
    dims = {m.spec.num_classes for m in models}
    if len(dims) != 1:
        raise InferenceError(f"ensemble members disagree on class count: {sorted(dims)}")
    return models


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32) / 255.0)
    return x.permute(0, 3, 1, 2).contiguous()


def model_logits(model: WbcClassifier, images: np.ndarray, tta_k: int = 8,
                 batch_size: int = 32) -> np.ndarray:
    """Mean logits over `tta_k` dihedral views (view 0 is the identity).

    `images` is (N, H, W, 3) in [0, 255]. Views cycle through the 8 exact
    square symmetries; accumulation is float64.
    """
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InferenceError(f"expected (N, H, W, 3) images, got {images.shape}")
    n = images.shape[0]
    model.eval()
    out: np.ndarray | None = None
    with torch.no_grad():
        for view in range(tta_k):
            transformed = np.stack([dihedral(img, view % 8) for img in images])
            rows = []
            for start in range(0, n, batch_size):
                logits = model(_to_tensor(transformed[start:start + batch_size]))
                rows.append(logits.double().numpy())
            view_logits = np.concatenate(rows, axis=0)
            out = view_logits if out is None else out + view_logits
    assert out is not None
    return out / tta_k


def ensemble_logits(models: Sequence[WbcClassifier], images: np.ndarray,
                    spec: EnsembleSpec) -> np.ndarray:
    """Ensemble scores for a batch: mean over members of each member's
    TTA-mean logits ("logit") or of their softmax ("probability")."""
    if not models:
        raise InferenceError("no models to ensemble")
    acc: np.ndarray | None = None
    for model in models:
        scores = model_logits(model, images, spec.tta_k, spec.batch_size)
        if spec.average == "probability":
            shifted = scores - scores.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            scores = e / e.sum(axis=1, keepdims=True)
        acc = scores if acc is None else acc + scores
    return acc / len(models)


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    predicted_class: str
    tie_flag: bool


def predict(matrix: LogitMatrix) -> list[Prediction]:
    """Argmax per row; exact ties resolve to the lowest class index and are
    flagged."""
    preds = []
    for sid, row in zip(matrix.sample_ids, matrix.values):
        best = int(np.argmax(row))
        tie = bool(np.sum(row == row[best]) > 1)
        preds.append(Prediction(sid, matrix.codes[best], tie))
    return preds


def save_predictions(predictions: Sequence[Prediction], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "predicted_class", "tie_flag"])
        for p in predictions:
            writer.writerow([p.sample_id, p.predicted_class, int(p.tie_flag)])
    os.replace(tmp, path)


def load_predictions(path) -> list[Prediction]:
    path = Path(path)
    if not path.is_file():
        raise InferenceError(f"predictions file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "predicted_class", "tie_flag"]:
            raise InferenceError(f"malformed predictions header in {path}: {header}")
        return [Prediction(row[0], row[1], bool(int(row[2]))) for row in reader]


@dataclass(frozen=True)
class InferenceSummary:
    processed: int
    skipped: int
    failed: int


MAX_FAILURE_FRACTION = 0.01


def infer_dataset(manifest: Manifest, ensemble: EnsembleSpec, out_dir,
                  denoise_config: DenoiseConfig | None = None,
                  image_size: int = 0, cache_limit: int = 0,
                  ) -> InferenceSummary:
    """Score every manifest record with the ensemble, resumably.

    Completed rows in out_dir/logits.csv are skipped on re-run; unreadable
    images are recorded in failures.csv and tolerated up to 1% of the
    manifest, beyond which the run raises after finishing. The final pass
    rewrites logits.csv sorted by sample id and derives predictions.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logits_path = out_dir / "logits.csv"
    codes = manifest.registry.codes

    kind = "logit" if ensemble.average == "logit" else "probability"
    prefix = _PREFIX[kind]

    done_ids: set[str] = set()
    if logits_path.is_file():
        existing = LogitMatrix.load(logits_path, codes=codes)
        if existing.kind != kind:
            raise InferenceError(
                f"existing {logits_path} holds {existing.kind} scores but this "
                f"run averages {ensemble.average}; remove it or change the mode")
        done_ids = set(existing.sample_ids)

    records = [r for r in manifest.records if r.image_path not in done_ids]
    skipped = len(manifest.records) - len(records)
    models = load_ensemble(ensemble)
    if models[0].spec.num_classes != len(codes):
        raise InferenceError(
            f"ensemble predicts {models[0].spec.num_classes} classes but the "
            f"registry has {len(codes)}")
    store = ImageStore(manifest, denoise_config, image_size, cache_limit)

    failures: list[tuple[str, str]] = []
    processed = 0
    new_file = not logits_path.is_file()
    with open(logits_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["sample_id"] + [prefix + c for c in codes])
        i = 0
        while i < len(records):
            batch = []
            images = []
            shape = None
            while i < len(records) and len(batch) < ensemble.batch_size:
                record = records[i]
                try:
                    img = store.get(record)
                except (OSError, ValueError) as exc:
                    failures.append((record.image_path, str(exc)))
                    i += 1
                    continue
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    break  # shape run ends; start a new batch
                batch.append(record)
                images.append(img)
                i += 1
            if not batch:
                continue
            values = ensemble_logits(models, np.stack(images), ensemble)
            for record, row in zip(batch, values):
                writer.writerow([record.image_path] + [f"{v:.10g}" for v in row])
            fh.flush()
            processed += len(batch)

    if failures:
        with open(out_dir / "failures.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "error"])
            writer.writerows(failures)

    final = LogitMatrix.load(logits_path, codes=codes).sorted_by_sample()
    final.save(logits_path)
    save_predictions(predict(final), out_dir / "predictions.csv")

    total = len(manifest.records)
    if total and len(failures) / total > MAX_FAILURE_FRACTION:
        raise InferenceError(
            f"{len(failures)} of {total} images failed to load "
            f"(> {MAX_FAILURE_FRACTION:.0%}); see {out_dir / 'failures.csv'}")
    return InferenceSummary(processed, skipped, len(failures))
