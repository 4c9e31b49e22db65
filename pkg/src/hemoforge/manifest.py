"""Sample manifests: dataset scanning, merging, and stratified fold assignment.

A manifest is the unit of all data flow: one row per image with an optional
label, a source tag, and (after assignment) a fold id. Manifests are immutable
once built and canonically ordered by path, so downstream behaviour does not
depend on directory scan order.

On-disk format is a CSV table with header ``image_path,label,source,fold``
(empty field = absent). Paths may be relative; they are resolved against the
manifest file's directory, which keeps runs relocatable.
"""

from __future__ import annotations

import csv
import os
import posixpath
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ManifestError
from .registry import ClassRegistry

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


class Source(str, Enum):
    WBCBENCH_TRAIN = "wbcbench_train"
    WBCBENCH_TEST = "wbcbench_test"
    ACEVEDO20 = "acevedo20"
    BLOOD8 = "blood8"
    CELLWIKI = "cellwiki"


#: sources whose records carry no label
UNLABELED_SOURCES = frozenset({Source.WBCBENCH_TEST})


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: str | None
    source: Source
    fold: int | None = None


def _normalize(path: str) -> str:
    return posixpath.normpath(path.replace(os.sep, "/"))


class Manifest:
    """Immutable, canonically ordered collection of sample records."""

    def __init__(
        self,
        records: Iterable[SampleRecord],
        registry: ClassRegistry,
        provenance: str = "",
        base_dir: Path | None = None,
    ):
        recs = sorted(records, key=lambda r: r.image_path)
        seen: dict[str, str] = {}
        dupes = []
        for r in recs:
            norm = _normalize(r.image_path)
            if norm in seen:
                dupes.append(r.image_path)
            seen[norm] = r.image_path
            if r.label is not None and r.label not in registry:
                raise ManifestError(f"label {r.label!r} of {r.image_path!r} is not in the registry")
            if (r.label is None) != (r.source in UNLABELED_SOURCES):
                raise ManifestError(
                    f"record {r.image_path!r}: label must be present exactly when the "
                    f"source ({r.source.value}) is a labeled source"
                )
        if dupes:
            raise ManifestError(f"duplicate image paths: {sorted(dupes)[:10]}")
        self.records: tuple[SampleRecord, ...] = tuple(recs)
        self.registry = registry
        self.provenance = provenance
        self.base_dir = Path(base_dir) if base_dir is not None else None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labeled(self) -> list[SampleRecord]:
        return [r for r in self.records if r.label is not None]

    def subset(self, predicate: Callable[[SampleRecord], bool]) -> "Manifest":
        return Manifest(
            [r for r in self.records if predicate(r)],
            self.registry,
            provenance=self.provenance,
            base_dir=self.base_dir,
        )

    def class_counts(self) -> dict[str, int]:
        counts = {code: 0 for code in self.registry.codes}
        for r in self.records:
            if r.label is not None:
                counts[r.label] += 1
        return counts

    def source_class_counts(self) -> dict[tuple[str, str], int]:
        counts: dict[tuple[str, str], int] = {}
        for r in self.records:
            if r.label is not None:
                key = (r.source.value, r.label)
                counts[key] = counts.get(key, 0) + 1
        return counts

    def fold_ids(self) -> list[int]:
        return sorted({r.fold for r in self.records if r.fold is not None})

    def resolve_path(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_path", "label", "source", "fold"])
            for r in self.records:
                writer.writerow([
                    r.image_path,
                    r.label or "",
                    r.source.value,
                    "" if r.fold is None else r.fold,
                ])
        os.replace(tmp, path)
        if self.provenance:
            path.with_suffix(path.suffix + ".provenance").write_text(
                self.provenance, encoding="utf-8"
            )

    @classmethod
    def load(cls, path: str | Path, registry: ClassRegistry) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["image_path", "label", "source", "fold"]:
                raise ManifestError(f"unexpected manifest header {header!r} in {path}")
            for row in reader:
                if len(row) != 4:
                    raise ManifestError(f"malformed manifest row {row!r} in {path}")
                img, label, source, fold = row
                records.append(SampleRecord(
                    image_path=img,
                    label=label or None,
                    source=Source(source),
                    fold=int(fold) if fold != "" else None,
                ))
        prov_path = path.with_suffix(path.suffix + ".provenance")
        provenance = prov_path.read_text(encoding="utf-8") if prov_path.exists() else f"loaded from {path}"
        return cls(records, registry, provenance=provenance, base_dir=path.parent)


def _scan_source(directory: Path) -> tuple[list[tuple[str | None, Path]], int]:
    """Return (local_label, file) pairs and a skipped-unreadable count.

    The local label is the name of the first-level subdirectory the file sits
    in; files directly under the source root have no local label.
    """
    found: list[tuple[str | None, Path]] = []
    unreadable = 0
    for dirpath, dirnames, filenames in os.walk(directory):
        dirnames.sort()
        for fname in sorted(filenames):
            fpath = Path(dirpath) / fname
            if fpath.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with open(fpath, "rb") as fh:
                    fh.read(1)
            except OSError:
                unreadable += 1
                continue
            rel = fpath.relative_to(directory)
            local_label = rel.parts[0] if len(rel.parts) > 1 else None
            found.append((local_label, fpath))
    return found, unreadable


def build_manifest(
    source_dirs: Mapping[Source | str, str | Path],
    class_map: Mapping[str, str | None],
    registry: ClassRegistry,
    relative_to: str | Path | None = None,
) -> Manifest:
    """Scan source directories into a manifest.

    For labeled sources the first-level subdirectory name is the source-local
    label, translated through ``class_map`` (a ``None`` mapping value means
    "explicitly skip this label"). An encountered label with no mapping at all
    is a hard error. Unreadable files are skipped and counted.
    """
    prov_lines = []
    records = []
    total_unreadable = 0
    for source_key in sorted(source_dirs, key=lambda s: Source(s).value):
        source = Source(source_key)
        directory = Path(source_dirs[source_key])
        if not directory.is_dir():
            raise ManifestError(f"source directory does not exist: {directory}")
        found, unreadable = _scan_source(directory)
        total_unreadable += unreadable
        kept = 0
        skipped_labels: dict[str, int] = {}
        for local_label, fpath in found:
            if source in UNLABELED_SOURCES:
                label = None
            else:
                if local_label is None:
                    skipped_labels["<no-subdirectory>"] = skipped_labels.get("<no-subdirectory>", 0) + 1
                    continue
                if local_label not in class_map:
                    raise ManifestError(
                        f"source label {local_label!r} under {directory} has no class mapping; "
                        f"map it to a registry code or to an explicit skip"
                    )
                label = class_map[local_label]
                if label is None:
                    skipped_labels[local_label] = skipped_labels.get(local_label, 0) + 1
                    continue
            path_str = str(fpath)
            if relative_to is not None:
                path_str = os.path.relpath(fpath, relative_to)
            records.append(SampleRecord(image_path=_normalize(path_str), label=label, source=source))
            kept += 1
        prov_lines.append(f"{source.value}: scanned {directory}, kept {kept} records")
        if unreadable:
            prov_lines.append(f"{source.value}: skipped {unreadable} unreadable files")
        for lbl, n in sorted(skipped_labels.items()):
            prov_lines.append(f"{source.value}: skipped label {lbl!r} ({n} files)")
    manifest = Manifest(
        records,
        registry,
        base_dir=Path(relative_to) if relative_to is not None else None,
    )
    for (src, cls_), n in sorted(manifest.source_class_counts().items()):
        prov_lines.append(f"count {src}/{cls_}: {n}")
    if total_unreadable:
        prov_lines.append(f"total unreadable files skipped: {total_unreadable}")
    return Manifest(manifest.records, registry, provenance="\n".join(prov_lines),
                    base_dir=manifest.base_dir)


def merge_manifests(manifests: Sequence[Manifest]) -> Manifest:
    """Union of records. Registries must match; duplicate paths are an error."""
    if not manifests:
        raise ManifestError("nothing to merge")
    registry = manifests[0].registry
    for m in manifests[1:]:
        if m.registry != registry:
            raise ManifestError("cannot merge manifests with different registries")
    all_records: list[SampleRecord] = []
    for m in manifests:
        all_records.extend(m.records)
    norms = [_normalize(r.image_path) for r in all_records]
    if len(set(norms)) != len(norms):
        seen: set[str] = set()
        offenders = sorted({n for n in norms if n in seen or seen.add(n)})
        raise ManifestError(f"duplicate image paths across manifests: {offenders[:10]}")
    base_dirs = {m.base_dir for m in manifests if m.base_dir is not None}
    base = base_dirs.pop() if len(base_dirs) == 1 else None
    prov = "\n".join(f"merged input with {len(m)} records" for m in manifests)
    return Manifest(all_records, registry, provenance=prov, base_dir=base)


def assign_stratified_folds(manifest: Manifest, k: int, seed: int) -> Manifest:
    """Assign each labeled record a fold in [0, k) so per-class fold counts
    differ by at most one. Unlabeled records stay fold-less.

    Deterministic: records are already canonically ordered, each class gets its
    own seeded shuffle, and folds go round-robin down the shuffled list.
    """
    if k < 2:
        raise ManifestError(f"fold count must be at least 2, got {k}")
    labeled_classes = {r.label for r in manifest.records if r.label is not None}
    if not labeled_classes:
        raise ManifestError("manifest has no labeled records to stratify")

    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        if r.label is not None:
            by_class.setdefault(r.label, []).append(i)

    folds: dict[int, int] = {}
    for code in manifest.registry.codes:
        indices = by_class.get(code)
        if not indices:
            continue
        rng = np.random.default_rng([seed, k, manifest.registry.index(code)])
        order = rng.permutation(len(indices))
        for pos, j in enumerate(order):
            folds[indices[j]] = pos % k
    new_records = [
        replace(r, fold=folds[i]) if i in folds else replace(r, fold=None)
        for i, r in enumerate(manifest.records)
    ]
    prov = manifest.provenance + f"\nassigned {k} stratified folds with seed {seed}"
    return Manifest(new_records, manifest.registry, provenance=prov.strip(),
                    base_dir=manifest.base_dir)
