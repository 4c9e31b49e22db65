import numpy as np
import pytest
import torch

from hemoforge.manifest import Manifest, SampleRecord, Source
from hemoforge.registry import ClassEntry, ClassRegistry, Lineage, default_registry

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def registry13():
    return default_registry()


@pytest.fixture()
def registry3():
    return ClassRegistry([
        ClassEntry("AA", "alpha", Lineage.GRANULOPOIESIS),
        ClassEntry("BB", "beta", Lineage.LYMPHOPOIESIS),
        ClassEntry("CC", "gamma", Lineage.MONOCYTOPOIESIS),
    ])


def make_records(labels, source=Source.WBCBENCH_TRAIN, folds=None, prefix="img"):
    records = []
    for i, label in enumerate(labels):
        fold = folds[i] if folds is not None else None
        records.append(SampleRecord(f"{prefix}_{i:04d}.png", label, source, fold))
    return records


@pytest.fixture()
def manifest3(registry3):
    labels = ["AA"] * 6 + ["BB"] * 4 + ["CC"] * 2
    folds = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]
    return Manifest(make_records(labels, folds=folds), registry3)


def write_image(path, rng, size=24, base=None):
    """A small random-but-smooth RGB test image on disk."""
    from PIL import Image
    lo = rng.integers(40, 80)
    arr = np.clip(
        lo + rng.normal(0, 4, size=(size, size, 3))
        + np.linspace(0, 60, size)[None, :, None],
        0, 255,
    ).astype(np.uint8) if base is None else base
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return arr
