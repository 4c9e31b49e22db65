import numpy as np
import pytest

from conftest import make_records, write_image
from hemoforge.errors import ManifestError
from hemoforge.manifest import (
    Manifest,
    SampleRecord,
    Source,
    assign_stratified_folds,
    build_manifest,
    merge_manifests,
)


def test_records_are_canonically_ordered(registry3):
    records = [
        SampleRecord("z.png", "AA", Source.WBCBENCH_TRAIN),
        SampleRecord("a.png", "BB", Source.WBCBENCH_TRAIN),
        SampleRecord("m.png", "CC", Source.WBCBENCH_TRAIN),
    ]
    manifest = Manifest(records, registry3)
    assert [r.image_path for r in manifest] == ["a.png", "m.png", "z.png"]


def test_duplicate_paths_rejected(registry3):
    records = make_records(["AA", "BB"])
    records.append(records[0])
    with pytest.raises(ManifestError, match="duplicate"):
        Manifest(records, registry3)


def test_unknown_label_rejected(registry3):
    with pytest.raises(ManifestError, match="'ZZ'"):
        Manifest([SampleRecord("a.png", "ZZ", Source.WBCBENCH_TRAIN)], registry3)


def test_label_presence_must_match_source(registry3):
    with pytest.raises(ManifestError):
        Manifest([SampleRecord("a.png", None, Source.WBCBENCH_TRAIN)], registry3)
    with pytest.raises(ManifestError):
        Manifest([SampleRecord("a.png", "AA", Source.WBCBENCH_TEST)], registry3)
    # the valid pairings
    Manifest([SampleRecord("a.png", "AA", Source.WBCBENCH_TRAIN),
              SampleRecord("b.png", None, Source.WBCBENCH_TEST)], registry3)


def test_class_counts_and_labeled(manifest3):
    counts = manifest3.class_counts()
    assert counts == {"AA": 6, "BB": 4, "CC": 2}
    assert len(manifest3.labeled()) == 12


def test_save_load_roundtrip(tmp_path, registry3):
    labels = ["AA", "BB", None]
    sources = [Source.WBCBENCH_TRAIN, Source.ACEVEDO20, Source.WBCBENCH_TEST]
    records = [SampleRecord(f"sub/r{i}.png", labels[i], sources[i], i % 2)
               for i in range(3)]
    manifest = Manifest(records, registry3, provenance="three records")
    path = tmp_path / "manifest.csv"
    manifest.save(path)
    loaded = Manifest.load(path, registry3)
    assert loaded.records == manifest.records
    assert loaded.provenance == "three records"
    assert loaded.base_dir == tmp_path
    assert loaded.resolve_path(loaded.records[0]) == tmp_path / "sub/r0.png"


def test_load_rejects_bad_header(tmp_path, registry3):
    path = tmp_path / "manifest.csv"
    path.write_text("path,label\nx,y\n")
    with pytest.raises(ManifestError, match="header"):
        Manifest.load(path, registry3)


def test_build_manifest_scans_imagefolder(tmp_path, registry3):
    rng = np.random.default_rng(0)
    src = tmp_path / "src"
    for code, n in (("alpha", 3), ("beta", 2)):
        for i in range(n):
            write_image(src / code / f"{code}_{i}.png", rng)
    (src / "alpha" / "notes.txt").write_text("ignored")
    class_map = {"alpha": "AA", "beta": "BB"}
    manifest = build_manifest({Source.WBCBENCH_TRAIN: src}, class_map, registry3,
                              relative_to=tmp_path)
    assert manifest.class_counts() == {"AA": 3, "BB": 2, "CC": 0}
    assert all(not r.image_path.startswith("/") for r in manifest)
    assert "kept 5 records" in manifest.provenance


def test_build_manifest_unmapped_label_is_error(tmp_path, registry3):
    rng = np.random.default_rng(0)
    src = tmp_path / "src"
    write_image(src / "mystery" / "x.png", rng)
    with pytest.raises(ManifestError, match="mystery"):
        build_manifest({Source.WBCBENCH_TRAIN: src}, {}, registry3)


def test_build_manifest_explicit_skip(tmp_path, registry3):
    rng = np.random.default_rng(0)
    src = tmp_path / "src"
    write_image(src / "alpha" / "x.png", rng)
    write_image(src / "junk" / "y.png", rng)
    manifest = build_manifest({Source.WBCBENCH_TRAIN: src},
                              {"alpha": "AA", "junk": None}, registry3)
    assert len(manifest) == 1
    assert "skipped label 'junk'" in manifest.provenance


def test_build_manifest_missing_dir(tmp_path, registry3):
    with pytest.raises(ManifestError, match="does not exist"):
        build_manifest({Source.WBCBENCH_TRAIN: tmp_path / "nope"}, {}, registry3)


def test_merge_rejects_duplicates_and_foreign_registry(registry3, registry13):
    a = Manifest(make_records(["AA"], prefix="a"), registry3)
    b = Manifest(make_records(["BB"], prefix="a"), registry3)  # same paths
    with pytest.raises(ManifestError, match="duplicate"):
        merge_manifests([a, b])
    c = Manifest([SampleRecord("c.png", "SNE", Source.WBCBENCH_TRAIN)], registry13)
    with pytest.raises(ManifestError, match="registries"):
        merge_manifests([a, c])


def test_merge_union(registry3):
    a = Manifest(make_records(["AA", "AA"], prefix="a"), registry3)
    b = Manifest(make_records(["BB"], prefix="b"), registry3)
    merged = merge_manifests([a, b])
    assert len(merged) == 3
    assert merged.class_counts()["AA"] == 2


class TestStratifiedFolds:
    def _manifest(self, registry3, n_a=30, n_b=10, n_c=4):
        labels = ["AA"] * n_a + ["BB"] * n_b + ["CC"] * n_c
        return Manifest(make_records(labels), registry3)

    def test_per_class_balance(self, registry3):
        manifest = assign_stratified_folds(self._manifest(registry3), 3, seed=9)
        for code, total in manifest.class_counts().items():
            if not total:
                continue
            per_fold = [sum(1 for r in manifest if r.label == code and r.fold == f)
                        for f in range(3)]
            assert sum(per_fold) == total
            assert max(per_fold) - min(per_fold) <= 1

    def test_deterministic_and_seed_sensitive(self, registry3):
        m = self._manifest(registry3)
        f1 = [r.fold for r in assign_stratified_folds(m, 3, seed=9)]
        f2 = [r.fold for r in assign_stratified_folds(m, 3, seed=9)]
        f3 = [r.fold for r in assign_stratified_folds(m, 3, seed=10)]
        assert f1 == f2
        assert f1 != f3

    def test_oracle_assignment(self, registry3):
        """Independent reimplementation: shuffle each class's positions with
        the documented seed sequence, then fold = position % k."""
        m = self._manifest(registry3, 7, 5, 3)
        k, seed = 3, 123
        assigned = assign_stratified_folds(m, k, seed)
        expected = {}
        for code in registry3.codes:
            idxs = [i for i, r in enumerate(m.records) if r.label == code]
            rng = np.random.default_rng([seed, k, registry3.index(code)])
            order = rng.permutation(len(idxs))
            for pos, j in enumerate(order):
                expected[idxs[j]] = pos % k
        assert [r.fold for r in assigned.records] == \
            [expected[i] for i in range(len(m.records))]

    def test_unlabeled_stay_foldless(self, registry3):
        records = make_records(["AA", "AA", "AA"]) + \
            [SampleRecord("t.png", None, Source.WBCBENCH_TEST)]
        m = assign_stratified_folds(Manifest(records, registry3), 2, 0)
        unlabeled = [r for r in m if r.label is None]
        assert unlabeled[0].fold is None

    def test_k_below_two_rejected(self, registry3):
        with pytest.raises(ManifestError, match="at least 2"):
            assign_stratified_folds(self._manifest(registry3), 1, 0)
