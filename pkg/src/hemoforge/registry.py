"""Class registry: the ordered list of class codes that fixes logit-column meaning.

The canonical registry has exactly 13 entries and ships as a versioned CSV
resource. Metric and analysis code is generic over registry size, so tests and
small experiments may construct ad-hoc registries of any length; the pipeline
itself always runs on the canonical one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import RegistryError

CANONICAL_SIZE = 13
CANONICAL_CODES = (
    "SNE", "LY", "MO", "BL", "EO", "MY", "BNE",
    "VLY", "MMY", "PMY", "PC", "PLY", "BA",
)


class Lineage(str, Enum):
    GRANULOPOIESIS = "granulopoiesis"
    MONOCYTOPOIESIS = "monocytopoiesis"
    LYMPHOPOIESIS = "lymphopoiesis"
    UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class ClassEntry:
    code: str
    name: str
    lineage: Lineage


class ClassRegistry:
    """Immutable ordered class list. Order is the logit-column order."""

    def __init__(self, entries: Iterable[ClassEntry]):
        self.entries: tuple[ClassEntry, ...] = tuple(entries)
        if not self.entries:
            raise RegistryError("registry must have at least one class")
        codes = [e.code for e in self.entries]
        if len(set(codes)) != len(codes):
            dupes = sorted({c for c in codes if codes.count(c) > 1})
            raise RegistryError(f"duplicate class codes: {dupes}")
        self._index = {e.code: i for i, e in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassRegistry) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(e.code for e in self.entries)

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise RegistryError(f"unknown class code {code!r}") from None

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def lineage_groups(self) -> dict[Lineage, list[str]]:
        """Class codes grouped by lineage, in registry order within each group."""
        groups: dict[Lineage, list[str]] = {}
        for e in self.entries:
            groups.setdefault(e.lineage, []).append(e.code)
        return groups

    @classmethod
    def from_file(cls, path: str | Path, strict_canonical: bool = False) -> "ClassRegistry":
        """Read `code,name,lineage` rows; `#` lines are comments."""
        entries = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(ln for ln in fh if ln.strip() and not ln.startswith("#")):
                if len(row) != 3:
                    raise RegistryError(f"bad registry row {row!r} in {path}")
                code, name, lineage = (c.strip() for c in row)
                try:
                    entries.append(ClassEntry(code, name, Lineage(lineage)))
                except ValueError:
                    raise RegistryError(f"unknown lineage {lineage!r} for class {code!r}") from None
        reg = cls(entries)
        if strict_canonical:
            reg.require_canonical()
        return reg

    def to_file(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("# code,name,lineage\n")
            writer = csv.writer(fh)
            for e in self.entries:
                writer.writerow([e.code, e.name, e.lineage.value])

    def require_canonical(self) -> None:
        if self.codes != CANONICAL_CODES:
            raise RegistryError(
                f"registry is not canonical: expected the {CANONICAL_SIZE} codes "
                f"{CANONICAL_CODES}, got {self.codes}"
            )


def default_registry() -> ClassRegistry:
    """The canonical 13-class registry shipped with the package."""
    res = resources.files("hemoforge").joinpath("resources/classes_v1.csv")
    with resources.as_file(res) as path:
        return ClassRegistry.from_file(path, strict_canonical=True)
