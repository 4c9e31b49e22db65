import numpy as np
import pytest

from hemoforge.errors import MetricsError
from hemoforge.oof import out_of_fold_eval, save_provenance
from hemoforge.registry import ClassEntry, ClassRegistry, Lineage
from hemoforge.synth import synth_dataset
from hemoforge.training import GridEntry
from tests.test_inference import make_checkpoint


def tiny_registry():
    return ClassRegistry([
        ClassEntry("AA", "alpha", Lineage.GRANULOPOIESIS),
        ClassEntry("BB", "beta", Lineage.LYMPHOPOIESIS),
        ClassEntry("CC", "gamma", Lineage.MONOCYTOPOIESIS),
    ])


@pytest.fixture(scope="module")
def oof_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("oof")
    data = synth_dataset(root / "data", [6, 6, 6], registry=tiny_registry(),
                         image_size=16, seed=9, folds=3)
    grid_dir = root / "grid"
    grid_dir.mkdir()
    entries = []
    for arch_index, arch in enumerate(["tiny-mlp", "tiny-mlp-b"]):
        for fold in range(3):
            name = f"{arch}_fold{fold}.pt"
            make_checkpoint(grid_dir / name, seed=10 * arch_index + fold, fold=fold)
            entries.append(GridEntry(arch, fold, name, 0.5))
    return data, grid_dir, entries


class TestValidation:
    def test_bad_group_mode(self, oof_setup):
        data, grid_dir, entries = oof_setup
        with pytest.raises(MetricsError, match="group_by"):
            out_of_fold_eval(entries, data.manifest, grid_dir, group_by="fold")

    def test_duplicate_cell_rejected(self, oof_setup):
        data, grid_dir, entries = oof_setup
        with pytest.raises(MetricsError, match="duplicate"):
            out_of_fold_eval(entries + [entries[0]], data.manifest, grid_dir)

    def test_missing_cell_named(self, oof_setup):
        data, grid_dir, entries = oof_setup
        partial = [e for e in entries if not (e.backbone_id == "tiny-mlp-b"
                                              and e.fold == 2)]
        with pytest.raises(MetricsError, match="'tiny-mlp-b' fold 2"):
            out_of_fold_eval(partial, data.manifest, grid_dir)

    def test_unfolded_manifest_rejected(self, oof_setup, tmp_path):
        _, grid_dir, entries = oof_setup
        flat = synth_dataset(tmp_path / "flat", [2, 2, 2],
                             registry=tiny_registry(), image_size=16, seed=1)
        with pytest.raises(MetricsError, match="fold-assigned"):
            out_of_fold_eval(entries, flat.manifest, grid_dir)


class TestEvaluation:
    def test_ensemble_group_covers_every_sample_once(self, oof_setup):
        data, grid_dir, entries = oof_setup
        results = out_of_fold_eval(entries, data.manifest, grid_dir,
                                   group_by="ensemble", tta_k=2, batch_size=8)
        assert set(results) == {"ensemble"}
        res = results["ensemble"]
        labeled_ids = sorted(r.image_path for r in data.manifest.labeled())
        assert list(res.logits.sample_ids) == labeled_ids
        assert res.confusion.total == len(labeled_ids)
        assert 0.0 <= res.report.macro_f1 <= 1.0

    def test_architecture_groups(self, oof_setup):
        data, grid_dir, entries = oof_setup
        results = out_of_fold_eval(entries, data.manifest, grid_dir,
                                   group_by="architecture", tta_k=2, batch_size=8)
        assert set(results) == {"tiny-mlp", "tiny-mlp-b"}
        for res in results.values():
            assert len(res.logits.sample_ids) == 18

    def test_samples_scored_only_by_heldout_fold_models(self, oof_setup):
        data, grid_dir, entries = oof_setup
        results = out_of_fold_eval(entries, data.manifest, grid_dir,
                                   group_by="ensemble", tta_k=1, batch_size=8)
        fold_of = {r.image_path: r.fold for r in data.manifest.labeled()}
        prov = results["ensemble"].provenance
        assert set(prov) == set(fold_of)
        for sid, checkpoints in prov.items():
            assert len(checkpoints) == 2                # one per architecture
            for path in checkpoints:
                assert f"fold{fold_of[sid]}.pt" in path

    def test_architecture_provenance_is_single_model(self, oof_setup):
        data, grid_dir, entries = oof_setup
        results = out_of_fold_eval(entries, data.manifest, grid_dir,
                                   group_by="architecture", tta_k=1, batch_size=8)
        for arch, res in results.items():
            for checkpoints in res.provenance.values():
                assert len(checkpoints) == 1
                assert arch + "_fold" in checkpoints[0]

    def test_ensemble_is_mean_of_fold_members(self, oof_setup):
        # ensemble logits for one sample = mean over the two architectures
        data, grid_dir, entries = oof_setup
        ens = out_of_fold_eval(entries, data.manifest, grid_dir,
                               group_by="ensemble", tta_k=2, batch_size=8)["ensemble"]
        per_arch = out_of_fold_eval(entries, data.manifest, grid_dir,
                                    group_by="architecture", tta_k=2, batch_size=8)
        stacked = np.mean([per_arch["tiny-mlp"].logits.values,
                           per_arch["tiny-mlp-b"].logits.values], axis=0)
        assert per_arch["tiny-mlp"].logits.sample_ids == ens.logits.sample_ids
        np.testing.assert_allclose(ens.logits.values, stacked, rtol=1e-6, atol=1e-8)

    def test_probability_average_mode(self, oof_setup):
        data, grid_dir, entries = oof_setup
        results = out_of_fold_eval(entries, data.manifest, grid_dir,
                                   group_by="ensemble", tta_k=1, batch_size=8,
                                   average="probability")
        matrix = results["ensemble"].logits
        assert matrix.kind == "probability"
        np.testing.assert_allclose(matrix.values.sum(axis=1), 1.0, atol=1e-9)


def test_save_provenance(tmp_path):
    save_provenance({"a.png": ("x.pt", "y.pt"), "b.png": ("z.pt",)},
                    tmp_path / "prov.csv")
    text = (tmp_path / "prov.csv").read_text()
    assert "a.png,x.pt;y.pt" in text
    assert "b.png,z.pt" in text
    assert text.startswith("sample_id,checkpoints")
