"""Model training: alpha-balanced focal loss, cosine learning-rate decay,
exponential moving average of weights, early stopping on validation macro-F1,
and the backbone-by-fold grid driver.

A fold's training split is everything assigned to the other folds; samples are
drawn with replacement using effective-number class weights, so one epoch is
ceil(n_train / batch_size) gradient steps rather than a pass over the data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, apply_batch_mixing, train_augment
from .denoise import DenoiseConfig
from .errors import TrainingError
from .images import ImageStore
from .imbalance import ClassWeights, weighted_sample_stream
from .manifest import Manifest, SampleRecord
from .metrics import compute_metrics, confusion_matrix
from .models import ModelSpec, WbcClassifier, WeightProvider, build_model


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary parts, via sha256 of their repr."""
    text = ":".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Soft-target focal loss, averaged over the batch.

    Per sample: sum_c t[c] * alpha * (1 - p[c])**gamma * (-log p[c]) with
    p = softmax(logits). Target rows must sum to 1 within 1e-4; mixed batches
    satisfy this by construction.
    """
    if logits.ndim != 2 or targets.shape != logits.shape:
        raise TrainingError(
            f"focal_loss expects matching (batch, classes) tensors, got "
            f"{tuple(logits.shape)} and {tuple(targets.shape)}")
    row_sums = targets.sum(dim=1)
    bad = (row_sums - 1.0).abs() > 1e-4
    if bool(bad.any()):
        idx = int(bad.nonzero()[0])
        raise TrainingError(
            f"target row {idx} sums to {float(row_sums[idx]):.6f}, expected 1")
    log_p = torch.log_softmax(logits, dim=1)
    p = log_p.exp()
    weight = alpha * (1.0 - p) ** gamma
    per_sample = (targets * weight * (-log_p)).sum(dim=1)
    return per_sample.mean()


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Learning rate at `step` of a cosine decay from lr_max to lr_min.

    step 0 returns lr_max; step == total_steps returns lr_min exactly.
    """
    if total_steps < 1:
        raise TrainingError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside [0, {total_steps}]")
    if lr_min > lr_max:
        raise TrainingError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    cos = math.cos(math.pi * step / total_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + cos)


def ema_update(ema: Mapping[str, torch.Tensor], current: Mapping[str, torch.Tensor],
               decay: float) -> dict[str, torch.Tensor]:
    """One EMA step: decay * ema + (1 - decay) * current, per tensor."""
    if not 0.0 <= decay < 1.0:
        raise TrainingError(f"ema decay must be in [0, 1), got {decay}")
    if set(ema) != set(current):
        missing = set(ema) ^ set(current)
        raise TrainingError(f"ema/current key mismatch: {sorted(missing)}")
    out: dict[str, torch.Tensor] = {}
    for name, old in ema.items():
        new = current[name]
        if old.shape != new.shape:
            raise TrainingError(
                f"ema tensor {name!r} shape {tuple(old.shape)} vs {tuple(new.shape)}")
        if old.dtype.is_floating_point:
            out[name] = old * decay + new.to(old.dtype) * (1.0 - decay)
        else:
            # Integer buffers (e.g. batch counters) are copied, not averaged.
            out[name] = new.clone()
    return out


class EmaTracker:
    """Keeps an exponential moving average of a model's state dict.

    `apply_to` swaps the EMA weights into the model (stashing the current
    ones); `restore` swaps them back. Evaluation during training uses the
    apply/restore pair so optimization continues from the raw weights.
    """

    def __init__(self, model: torch.nn.Module, decay: float):
        if not 0.0 <= decay < 1.0:
            raise TrainingError(f"ema decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}
        self._stash: dict[str, torch.Tensor] | None = None

    def update(self, model: torch.nn.Module) -> None:
        with torch.no_grad():
            self.shadow = ema_update(self.shadow, model.state_dict(), self.decay)

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self.shadow.items()}

    def apply_to(self, model: torch.nn.Module) -> None:
        if self._stash is not None:
            raise TrainingError("EMA weights already applied; restore first")
        self._stash = {k: v.detach().clone() for k, v in model.state_dict().items()}
        model.load_state_dict(self.shadow)

    def restore(self, model: torch.nn.Module) -> None:
        if self._stash is None:
            raise TrainingError("no stashed weights; apply_to was not called")
        model.load_state_dict(self._stash)
        self._stash = None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    patience_epochs: int = 10
    lr_max: float = 5e-4
    lr_min: float = 5e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    ema_decay: float = 0.999
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    image_size: int = 0
    cache_limit: int = 5000
    seed: int = 20221

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise TrainingError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience_epochs < 1:
            raise TrainingError(
                f"patience_epochs must be >= 1, got {self.patience_epochs}")
        if not 0 < self.lr_min <= self.lr_max:
            raise TrainingError(
                f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise TrainingError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def digest(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Trained fold model: raw and EMA weights at the best validation epoch."""

    spec: ModelSpec
    weights: dict[str, torch.Tensor]
    ema_weights: dict[str, torch.Tensor]
    fold: int
    best_val_macro_f1: float
    epoch: int
    config_digest: str
    history: list[dict]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "spec": self.spec.to_dict(),
            "weights": self.weights,
            "ema_weights": self.ema_weights,
            "fold": self.fold,
            "best_val_macro_f1": self.best_val_macro_f1,
            "epoch": self.epoch,
            "config_digest": self.config_digest,
            "history": json.dumps(self.history),
        }
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise TrainingError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return cls(
            spec=ModelSpec.from_dict(payload["spec"]),
            weights=payload["weights"],
            ema_weights=payload["ema_weights"],
            fold=int(payload["fold"]),
            best_val_macro_f1=float(payload["best_val_macro_f1"]),
            epoch=int(payload["epoch"]),
            config_digest=str(payload["config_digest"]),
            history=json.loads(payload["history"]),
        )

    def build(self, use_ema: bool = True) -> WbcClassifier:
        model = build_model(self.spec, seed=0, load_pretrained=False)
        model.load_state_dict(self.ema_weights if use_ema else self.weights)
        model.eval()
        return model


def _one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _batch_to_tensor(images: np.ndarray) -> torch.Tensor:
    # (B, H, W, 3) in [0, 255] -> (B, 3, H, W) float32 in [0, 1].
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32) / 255.0)
    return x.permute(0, 3, 1, 2).contiguous()


def _evaluate_macro_f1(model: WbcClassifier, records: Sequence[SampleRecord],
                       store: ImageStore, registry, batch_size: int) -> float:
    """Validation macro-F1 on raw (unmixed, unaugmented, no-TTA) images."""
    model.eval()
    y_true: list[str] = []
    y_pred: list[str] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            x = _batch_to_tensor(np.stack([store.get(r) for r in chunk]))
            pred = model(x).argmax(dim=1).tolist()
            y_true.extend(r.label for r in chunk)
            y_pred.extend(registry.entries[i].code for i in pred)
    cm = confusion_matrix(y_true, y_pred, registry)
    return compute_metrics(cm).macro_f1


def train_fold(manifest: Manifest, fold_id: int, spec: ModelSpec,
               train_config: TrainConfig, denoise_config: DenoiseConfig | None,
               augment_config: AugmentConfig, weights: ClassWeights,
               weight_provider: WeightProvider | None = None,
               run_seed: int | None = None,
               on_train_batch: Callable[[list[str]], None] | None = None,
               ) -> Checkpoint:
    """Trains one model with fold `fold_id` held out for validation.

    Early stopping tracks EMA validation macro-F1 with strict improvement;
    after `patience_epochs` epochs without a new best, training stops and the
    best epoch's raw and EMA weights are returned.
    """
    registry = manifest.registry
    labeled = manifest.labeled()
    if fold_id not in set(manifest.fold_ids()):
        raise TrainingError(f"fold {fold_id} not present in manifest")
    train_records = [r for r in labeled if r.fold is not None and r.fold != fold_id]
    val_records = [r for r in labeled if r.fold == fold_id]
    if not train_records or not val_records:
        raise TrainingError(
            f"fold {fold_id}: empty split (train={len(train_records)}, "
            f"val={len(val_records)})")

    seed = train_config.seed if run_seed is None else run_seed
    model = build_model(spec, weight_provider=weight_provider, seed=seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr_max,
                                  betas=train_config.betas,
                                  weight_decay=train_config.weight_decay)
    ema = EmaTracker(model, train_config.ema_decay)
    store = ImageStore(manifest, denoise_config, train_config.image_size,
                       train_config.cache_limit)
    stream = weighted_sample_stream(train_records, weights, seed=derive_seed(seed, "sampler"))
    aug_rng = np.random.default_rng([seed, 1])
    mix_rng = np.random.default_rng([seed, 2])

    steps_per_epoch = math.ceil(len(train_records) / train_config.batch_size)
    total_steps = train_config.max_epochs * steps_per_epoch
    label_index = {e.code: i for i, e in enumerate(registry.entries)}

    best_score = -math.inf
    best_epoch = 0
    best_weights: dict[str, torch.Tensor] = {}
    best_ema: dict[str, torch.Tensor] = {}
    epochs_since_best = 0
    history: list[dict] = []
    global_step = 0

    for epoch in range(1, train_config.max_epochs + 1):
        model.train()
        epoch_loss = 0.0
        last_lr = 0.0
        for _ in range(steps_per_epoch):
            batch_records = [train_records[next(stream)]
                             for _ in range(train_config.batch_size)]
            images = np.stack([
                train_augment(store.get(r), aug_rng, augment_config)
                for r in batch_records
            ]).astype(np.float64)
            targets = _one_hot([label_index[r.label] for r in batch_records],
                               spec.num_classes)
            mixed = apply_batch_mixing(images, targets, augment_config, mix_rng)
            x = _batch_to_tensor(mixed.images)
            t = torch.from_numpy(mixed.targets).to(torch.float32)

            last_lr = cosine_lr(global_step, total_steps,
                                train_config.lr_max, train_config.lr_min)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            optimizer.zero_grad()
            loss = focal_loss(model(x), t, train_config.focal_alpha,
                              train_config.focal_gamma)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {global_step} "
                    f"(lr={last_lr:.3e}); check inputs and learning rate")
            loss.backward()
            optimizer.step()
            ema.update(model)
            if on_train_batch is not None:
                on_train_batch([r.image_path for r in batch_records])
            epoch_loss += float(loss.detach())
            global_step += 1

        ema.apply_to(model)
        try:
            score = _evaluate_macro_f1(model, val_records, store, registry,
                                       train_config.batch_size)
        finally:
            ema.restore(model)
        history.append({
            "epoch": epoch,
            "val_macro_f1": score,
            "mean_loss": epoch_loss / steps_per_epoch,
            "lr_last": last_lr,
        })
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_weights = {k: v.detach().clone()
                            for k, v in model.state_dict().items()}
            best_ema = ema.state_dict()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_config.patience_epochs:
                break

    return Checkpoint(
        spec=spec,
        weights=best_weights,
        ema_weights=best_ema,
        fold=fold_id,
        best_val_macro_f1=best_score,
        epoch=best_epoch,
        config_digest=train_config.digest(),
        history=history,
    )


@dataclass(frozen=True)
class GridEntry:
    backbone_id: str
    fold: int
    checkpoint_path: str
    best_val_macro_f1: float


GRID_HEADER = ["backbone_id", "fold", "checkpoint_path", "best_val_macro_f1"]


def save_grid(entries: Iterable[GridEntry], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_HEADER)
        for e in entries:
            writer.writerow([e.backbone_id, e.fold, e.checkpoint_path,
                             f"{e.best_val_macro_f1:.6f}"])
    os.replace(tmp, path)


def load_grid(path) -> list[GridEntry]:
    path = Path(path)
    if not path.is_file():
        raise TrainingError(f"grid manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != GRID_HEADER:
            raise TrainingError(
                f"grid manifest header {header} != {GRID_HEADER} in {path}")
        entries = []
        for row in reader:
            if len(row) != 4:
                raise TrainingError(f"malformed grid row {row!r} in {path}")
            entries.append(GridEntry(row[0], int(row[1]), row[2], float(row[3])))
    return entries


def _train_one(args) -> GridEntry:
    (manifest, fold, spec, train_config, denoise_config, augment_config,
     weights, out_dir, num_threads) = args
    if num_threads:
        torch.set_num_threads(num_threads)
    seed = derive_seed(train_config.seed, spec.backbone_id, fold)
    ckpt = train_fold(manifest, fold, spec, train_config, denoise_config,
                      augment_config, weights, run_seed=seed)
    path = Path(out_dir) / f"{spec.backbone_id}_fold{fold}.pt"
    ckpt.save(path)
    return GridEntry(spec.backbone_id, fold, path.name, ckpt.best_val_macro_f1)


def train_grid(manifest: Manifest, specs: Sequence[ModelSpec],
               train_config: TrainConfig, denoise_config: DenoiseConfig | None,
               augment_config: AugmentConfig, weights: ClassWeights,
               out_dir, jobs: int = 1, resume: bool = True) -> list[GridEntry]:
    """Trains every (backbone, fold) pair and writes `grid.csv` in out_dir.

    Each cell gets its own seed derived from (base seed, backbone id, fold),
    so cells are independent of execution order and of each other. Completed
    checkpoints are kept and, with resume=True, skipped on re-run. The grid
    manifest is rewritten after every completed cell, so a failed run leaves
    a loadable record of what finished.
    """
    if not specs:
        raise TrainingError("train_grid needs at least one model spec")
    folds = sorted(set(manifest.fold_ids()))
    if not folds:
        raise TrainingError("manifest has no fold assignments; run fold "
                            "assignment before training")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_path = out_dir / "grid.csv"

    done: dict[tuple[str, int], GridEntry] = {}
    cells = [(spec, fold) for spec in specs for fold in folds]
    pending = []
    for spec, fold in cells:
        path = out_dir / f"{spec.backbone_id}_fold{fold}.pt"
        if resume and path.is_file():
            ckpt = Checkpoint.load(path)
            done[(spec.backbone_id, fold)] = GridEntry(
                spec.backbone_id, fold, path.name, ckpt.best_val_macro_f1)
        else:
            pending.append((spec, fold))

    def record(entry: GridEntry) -> None:
        done[(entry.backbone_id, entry.fold)] = entry
        ordered = [done[key] for key in
                   ((s.backbone_id, f) for s, f in cells) if key in done]
        save_grid(ordered, grid_path)

    if done:
        record(next(iter(done.values())))  # flush resumed entries to disk

    num_threads = 1 if jobs > 1 else 0
    payloads = [(manifest, fold, spec, train_config, denoise_config,
                 augment_config, weights, str(out_dir), num_threads)
                for spec, fold in pending]
    if jobs > 1 and payloads:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for entry in pool.map(_train_one, payloads):
                record(entry)
    else:
        for payload in payloads:
            record(_train_one(payload))

    return [done[(spec.backbone_id, fold)] for spec, fold in cells]


def desk_specs(num_classes: int = 13,
               head_dims: tuple[int, int, int, int] = (64, 48, 32, 24),
               ) -> list[ModelSpec]:
    """Three small CPU-friendly backbones for smoke-scale grids. The default
    head is narrowed to match; pass HeadSpec defaults to keep the full head."""
    return [ModelSpec.for_backbone(backbone_id, num_classes=num_classes,
                                   head_dims=head_dims)
            for backbone_id in ("tiny-conv", "tiny-conv-wide", "tiny-mlp")]
