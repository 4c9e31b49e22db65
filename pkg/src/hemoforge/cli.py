"""Command-line pipeline driver.

Verbs: prepare, denoise, train, infer, evaluate, analyze, report, synth-data.
Every verb takes an output directory, records the fully resolved config there
as `config.resolved`, and logs to `hemoforge.log`. Verbs whose primary output
already exists skip the work unless --force is given; `infer` and `train`
additionally resume partial runs.

Exit codes: 0 success, 1 configuration or usage error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import PipelineConfig
from .confident import (find_label_issues, misclassification_matrix,
                        save_label_issues)
from .denoise import estimate_sigma, nlm_denoise
from .errors import AnalysisError, ConfigError, HemoforgeError
from .imbalance import compute_class_weights
from .inference import EnsembleSpec, LogitMatrix, infer_dataset
from .manifest import (Manifest, Source, assign_stratified_folds,
                       build_manifest, merge_manifests)
from .oof import out_of_fold_eval, save_provenance
from .registry import default_registry
from .report import emit_report
from .synth import synth_dataset
from .training import load_grid, train_grid

log = logging.getLogger("hemoforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):             # usage problems exit 1, not 2
        raise ConfigError(message)


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True):
    parser.add_argument("--config", help="config file (section.key = value)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--force", action="store_true",
                        help="redo work even if outputs exist")


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config \
        else PipelineConfig.defaults()
    return config.with_overrides(args.overrides)


def _start_run(out_dir, config: PipelineConfig) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.resolved")
    for handler in list(log.handlers):
        log.removeHandler(handler)
        handler.close()
    log.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    for handler in (logging.FileHandler(out_dir / "hemoforge.log"),
                    logging.StreamHandler(sys.stderr)):
        handler.setFormatter(fmt)
        log.addHandler(handler)
    return out_dir


def _skip(path: Path, force: bool, what: str) -> bool:
    if path.exists() and not force:
        log.info("%s already exists (%s); skipping (use --force to redo)",
                 what, path)
        return True
    return False


def _load_manifest(path) -> Manifest:
    return Manifest.load(path, default_registry())


def _parse_class_map(path) -> dict[str, str | None]:
    mapping: dict[str, str | None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ConfigError(f"class map rows need 2 columns, got {row!r}")
            mapping[row[0].strip()] = row[1].strip() or None
    return mapping


def _rebase(manifest: Manifest, out_dir: Path) -> Manifest:
    """Re-anchor record paths relative to out_dir so a merged manifest saved
    there still resolves every image."""
    records = [replace(r, image_path=os.path.relpath(manifest.resolve_path(r),
                                                     out_dir).replace(os.sep, "/"))
               for r in manifest.records]
    return Manifest(records, manifest.registry, provenance=manifest.provenance,
                    base_dir=out_dir)


def cmd_prepare(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    manifest_path = out_dir / "manifest.csv"
    if _skip(manifest_path, args.force, "manifest"):
        return 0
    registry = default_registry()
    parts = []
    if args.sources:
        source_dirs = {}
        for item in args.sources:
            if "=" not in item:
                raise ConfigError(f"--source must be NAME=DIR, got {item!r}")
            name, directory = item.split("=", 1)
            try:
                source = Source(name)
            except ValueError:
                raise ConfigError(
                    f"unknown source {name!r}; valid: "
                    f"{', '.join(s.value for s in Source)}") from None
            source_dirs[source] = directory
        class_map = (_parse_class_map(args.class_map) if args.class_map
                     else {code: code for code in registry.codes})
        parts.append(build_manifest(source_dirs, class_map, registry,
                                    relative_to=out_dir))
    for path in args.manifests:
        parts.append(_rebase(_load_manifest(path), out_dir))
    if not parts:
        raise ConfigError("prepare needs --source and/or --manifest inputs")
    manifest = parts[0] if len(parts) == 1 else merge_manifests(parts)
    if not args.no_folds:
        manifest = assign_stratified_folds(manifest, config.get("data.folds"),
                                           config.get("data.seed"))
    manifest.save(manifest_path)
    counts = manifest.class_counts()
    log.info("prepared %d records (%d labeled) into %s", len(manifest),
             sum(counts.values()), manifest_path)
    return 0


def cmd_denoise(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    sigma_path = out_dir / "sigma.csv"
    if _skip(sigma_path, args.force, "sigma report"):
        return 0
    manifest = _load_manifest(args.manifest)
    denoise_config = config.denoise_config()
    if denoise_config is None:
        raise ConfigError("denoise.enabled is false; nothing to do")
    rows = []
    records = manifest.records[:args.limit] if args.limit else manifest.records
    new_records = []
    for record in records:
        arr = np.asarray(Image.open(manifest.resolve_path(record)).convert("RGB"))
        estimate = estimate_sigma(arr)
        bypassed = estimate.sigma_hat < denoise_config.bypass_threshold
        out = nlm_denoise(arr, estimate, denoise_config)
        rel = str(Path(record.image_path).with_suffix(".png"))
        target = out_dir / "denoised" / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(out).save(target)
        rows.append([record.image_path, f"{estimate.sigma_hat:.6f}", int(bypassed)])
        new_records.append(replace(record, image_path=f"denoised/{rel}"))
    Manifest(new_records, manifest.registry,
             provenance=manifest.provenance + "\ndenoised copies",
             base_dir=out_dir).save(out_dir / "manifest.csv")
    with open(sigma_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "sigma_hat", "bypassed"])
        writer.writerows(rows)
    bypass_count = sum(int(r[2]) for r in rows)
    log.info("denoised %d images (%d bypassed) into %s", len(rows),
             bypass_count, out_dir / "denoised")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    manifest = _load_manifest(args.manifest)
    specs = config.model_specs(num_classes=len(manifest.registry))
    folds = manifest.fold_ids()
    grid_path = out_dir / "grid.csv"
    if grid_path.is_file() and not args.force:
        existing = load_grid(grid_path)
        if len(existing) == len(specs) * len(folds):
            log.info("grid complete (%d cells); skipping (use --force to redo)",
                     len(existing))
            return 0
    weights = compute_class_weights(
        {c: n for c, n in manifest.class_counts().items()},
        beta=config.get("sampler.beta"))
    entries = train_grid(manifest, specs, config.train_config(),
                         config.denoise_config(), config.augment_config(),
                         weights, out_dir, jobs=args.jobs,
                         resume=not args.force)
    for e in entries:
        log.info("trained %s fold %d: best val macro-F1 %.4f",
                 e.backbone_id, e.fold, e.best_val_macro_f1)
    log.info("grid manifest written to %s", grid_path)
    return 0


def _grid_checkpoints(grid_arg: str) -> tuple[Path, list]:
    grid_path = Path(grid_arg)
    if grid_path.is_dir():
        grid_path = grid_path / "grid.csv"
    entries = load_grid(grid_path)
    return grid_path.parent, entries


def cmd_infer(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    if _skip(out_dir / "predictions.csv", args.force, "predictions"):
        return 0
    if args.force:
        for name in ("logits.csv", "predictions.csv", "failures.csv"):
            (out_dir / name).unlink(missing_ok=True)
    manifest = _load_manifest(args.manifest)
    grid_dir, entries = _grid_checkpoints(args.grid)
    paths = tuple(str(grid_dir / e.checkpoint_path) for e in entries)
    spec = EnsembleSpec(paths, tta_k=config.get("tta.k"),
                        use_ema=config.get("ensemble.use_ema"),
                        average=config.get("ensemble.average"),
                        batch_size=config.get("train.batch_size"))
    summary = infer_dataset(manifest, spec, out_dir,
                            denoise_config=config.denoise_config(),
                            image_size=config.get("data.image_size"),
                            cache_limit=config.get("train.cache_limit"))
    log.info("inference: %d scored, %d resumed, %d failed",
             summary.processed, summary.skipped, summary.failed)
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    manifest = _load_manifest(args.manifest)
    grid_dir, entries = _grid_checkpoints(args.grid)
    modes = (["architecture", "ensemble"] if args.group_by == "both"
             else [args.group_by])
    for mode in modes:
        expected = (["ensemble"] if mode == "ensemble"
                    else list(dict.fromkeys(e.backbone_id for e in entries)))
        if not args.force and all(
                (out_dir / "oof" / g / "report.txt").is_file() for g in expected):
            log.info("oof groups %s already evaluated; skipping", expected)
            continue
        results = out_of_fold_eval(
            entries, manifest, grid_dir, group_by=mode,
            tta_k=config.get("tta.k"),
            denoise_config=config.denoise_config(),
            use_ema=config.get("ensemble.use_ema"),
            average=config.get("ensemble.average"),
            batch_size=config.get("train.batch_size"),
            image_size=config.get("data.image_size"),
            cache_limit=config.get("train.cache_limit"))
        for group, result in results.items():
            group_dir = out_dir / "oof" / group
            group_dir.mkdir(parents=True, exist_ok=True)
            result.report.save(group_dir / "report.txt")
            result.confusion.save(group_dir / "confusion.csv")
            result.logits.save(group_dir / "logits.csv")
            save_provenance(result.provenance, group_dir / "provenance.csv")
            log.info("oof %s: macro-F1 %.4f, balanced accuracy %.4f",
                     group, result.report.macro_f1,
                     result.report.balanced_accuracy)
    return 0


def cmd_analyze(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    issues_path = out_dir / "issues.csv"
    if _skip(issues_path, args.force, "issues"):
        return 0
    manifest = _load_manifest(args.manifest)
    registry = manifest.registry
    matrix = LogitMatrix.load(args.logits, codes=registry.codes)
    probs_matrix = matrix.softmax()
    label_of = {r.image_path: r.label for r in manifest.labeled()}
    keep = [i for i, sid in enumerate(probs_matrix.sample_ids)
            if sid in label_of]
    if not keep:
        raise AnalysisError("no scored samples carry labels; cannot analyze")
    probs = probs_matrix.values[keep]
    ids = [probs_matrix.sample_ids[i] for i in keep]
    labels = [registry.index(label_of[sid]) for sid in ids]
    issues = find_label_issues(probs, labels, ids, registry.codes,
                               threshold=config.get("cl.self_confidence_max"))
    save_label_issues(issues, issues_path)
    misclassification_matrix(probs, labels, registry).save(out_dir / "joint.csv")
    log.info("flagged %d potential label issues out of %d samples into %s",
             len(issues), len(ids), issues_path)
    return 0


def cmd_report(args) -> int:
    config = _load_config(args)
    run_dir = Path(args.out)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory does not exist: {run_dir}")
    _start_run(run_dir, config)
    summary = emit_report(run_dir)
    log.info("report written to %s (%d plots, %d gaps)", summary.summary_path,
             len(summary.generated), len(summary.missing))
    for gap in summary.missing:
        log.info("missing artifact: %s", gap)
    return 0


def cmd_synth_data(args) -> int:
    config = _load_config(args)
    out_dir = _start_run(args.out, config)
    if _skip(out_dir / "manifest.csv", args.force, "synthetic manifest"):
        return 0
    registry = default_registry()
    if args.counts:
        counts = [int(v) for v in args.counts.split(",")]
    else:
        counts = [args.per_class] * len(registry)
    result = synth_dataset(out_dir, counts, registry=registry,
                           image_size=args.image_size,
                           seed=config.get("data.seed"),
                           flip_rate=args.flip_rate,
                           folds=config.get("data.folds") if args.folds else 0)
    log.info("synthesized %d images into %s", len(result.manifest), out_dir)
    if result.flips_path:
        log.info("label flips recorded in %s", result.flips_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hemoforge",
                     description="Imbalanced white-blood-cell classification "
                                 "pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="build, merge, and fold-assign manifests")
    _add_common(p)
    p.add_argument("--source", dest="sources", action="append", default=[],
                   metavar="NAME=DIR", help="scan an imagefolder source")
    p.add_argument("--manifest", dest="manifests", action="append", default=[],
                   help="merge an existing manifest")
    p.add_argument("--class-map", help="CSV mapping source labels to registry "
                                       "codes (empty code = skip)")
    p.add_argument("--no-folds", action="store_true",
                   help="skip stratified fold assignment")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("denoise", help="write denoised copies and a sigma report")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--limit", type=int, default=0,
                   help="only process the first N records")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("train", help="train the backbone-by-fold grid")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="train grid cells in parallel processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="ensemble inference over a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", required=True,
                   help="grid.csv (or its directory) from training")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="leakage-free out-of-fold evaluation")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--group-by", choices=["architecture", "ensemble", "both"],
                   default="ensemble")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="confident-learning label-error analysis")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--logits", required=True,
                   help="out-of-fold logits.csv to analyze")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="render plots and a summary for a run")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth-data", help="generate a synthetic desk dataset")
    _add_common(p)
    p.add_argument("--counts", help="comma-separated per-class counts")
    p.add_argument("--per-class", type=int, default=20,
                   help="uniform per-class count (when --counts absent)")
    p.add_argument("--image-size", type=int, default=48)
    p.add_argument("--flip-rate", type=float, default=0.0)
    p.add_argument("--folds", action="store_true",
                   help="also assign stratified folds")
    p.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"hemoforge: configuration error: {exc}", file=sys.stderr)
        return 1
    except HemoforgeError as exc:
        print(f"hemoforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
