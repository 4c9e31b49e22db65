import shutil

import numpy as np
import pytest

from hemoforge.cli import main
from hemoforge.inference import LogitMatrix, load_predictions
from hemoforge.manifest import Manifest
from hemoforge.metrics import ConfusionMatrix
from hemoforge.registry import default_registry
from hemoforge.training import load_grid

# SNE, LY, MO populated; the other ten classes empty
COUNTS = "6,6,6,0,0,0,0,0,0,0,0,0,0"

SHRINK = [
    "--set", "model.backbones=tiny-mlp",
    "--set", "model.head_dims=16,12,8,6",
    "--set", "train.batch_size=4",
    "--set", "train.max_epochs=1",
    "--set", "tta.k=1",
    "--set", "denoise.enabled=false",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_pipeline")
    data = root / "data"
    grid = root / "grid"
    inf = root / "inf"
    ev = root / "eval"
    an = root / "analysis"
    manifest = str(data / "manifest.csv")

    assert main(["synth-data", "--out", str(data), "--counts", COUNTS,
                 "--image-size", "16", "--folds", *SHRINK]) == 0
    assert main(["train", "--out", str(grid), "--manifest", manifest,
                 *SHRINK]) == 0
    assert main(["infer", "--out", str(inf), "--manifest", manifest,
                 "--grid", str(grid), *SHRINK]) == 0
    assert main(["evaluate", "--out", str(ev), "--manifest", manifest,
                 "--grid", str(grid), "--group-by", "both", *SHRINK]) == 0
    assert main(["analyze", "--out", str(an), "--manifest", manifest,
                 "--logits", str(ev / "oof" / "ensemble" / "logits.csv"),
                 *SHRINK]) == 0

    shutil.copytree(ev / "oof", data / "oof")
    shutil.copy(an / "issues.csv", data / "issues.csv")
    assert main(["report", "--out", str(data), *SHRINK]) == 0
    return {"root": root, "data": data, "grid": grid, "inf": inf,
            "eval": ev, "analysis": an, "manifest": manifest}


class TestPipeline:
    def test_synth_data_outputs(self, pipeline):
        data = pipeline["data"]
        assert (data / "config.resolved").is_file()
        assert (data / "hemoforge.log").is_file()
        manifest = Manifest.load(data / "manifest.csv", default_registry())
        assert len(manifest) == 18
        assert manifest.class_counts()["SNE"] == 6
        assert manifest.fold_ids() == [0, 1, 2]
        assert "model.backbones = tiny-mlp" in (data / "config.resolved").read_text()

    def test_train_outputs(self, pipeline):
        grid = pipeline["grid"]
        entries = load_grid(grid / "grid.csv")
        assert [(e.backbone_id, e.fold) for e in entries] == [
            ("tiny-mlp", 0), ("tiny-mlp", 1), ("tiny-mlp", 2)]
        for e in entries:
            assert (grid / e.checkpoint_path).is_file()

    def test_train_rerun_skips(self, pipeline):
        grid = pipeline["grid"]
        stamps = {p.name: p.stat().st_mtime_ns for p in grid.glob("*.pt")}
        assert main(["train", "--out", str(grid), "--manifest",
                     pipeline["manifest"], *SHRINK]) == 0
        assert {p.name: p.stat().st_mtime_ns for p in grid.glob("*.pt")} == stamps

    def test_infer_outputs(self, pipeline):
        inf = pipeline["inf"]
        matrix = LogitMatrix.load(inf / "logits.csv")
        assert len(matrix.sample_ids) == 18
        assert matrix.sample_ids == tuple(sorted(matrix.sample_ids))
        assert matrix.codes == default_registry().codes
        preds = load_predictions(inf / "predictions.csv")
        assert len(preds) == 18

    def test_infer_rerun_skips(self, pipeline):
        inf = pipeline["inf"]
        stamp = (inf / "logits.csv").stat().st_mtime_ns
        assert main(["infer", "--out", str(inf), "--manifest",
                     pipeline["manifest"], "--grid", str(pipeline["grid"]),
                     *SHRINK]) == 0
        assert (inf / "logits.csv").stat().st_mtime_ns == stamp

    def test_evaluate_outputs(self, pipeline):
        ev = pipeline["eval"]
        assert sorted(p.name for p in (ev / "oof").iterdir()) == [
            "ensemble", "tiny-mlp"]
        for group in ("ensemble", "tiny-mlp"):
            group_dir = ev / "oof" / group
            for name in ("report.txt", "confusion.csv", "logits.csv",
                         "provenance.csv"):
                assert (group_dir / name).is_file(), f"{group}/{name}"
            assert "macro_f1 = " in (group_dir / "report.txt").read_text()
            matrix = LogitMatrix.load(group_dir / "logits.csv")
            assert len(matrix.sample_ids) == 18

    def test_evaluate_rerun_skips(self, pipeline):
        ev = pipeline["eval"]
        target = ev / "oof" / "ensemble" / "logits.csv"
        stamp = target.stat().st_mtime_ns
        assert main(["evaluate", "--out", str(ev), "--manifest",
                     pipeline["manifest"], "--grid", str(pipeline["grid"]),
                     "--group-by", "both", *SHRINK]) == 0
        assert target.stat().st_mtime_ns == stamp

    def test_analyze_outputs(self, pipeline):
        an = pipeline["analysis"]
        text = (an / "issues.csv").read_text()
        assert text.startswith("sample_id,given_label,suggested_label,self_confidence")
        joint = ConfusionMatrix.load(an / "joint.csv", default_registry())
        assert joint.counts.shape == (13, 13)

    def test_report_outputs(self, pipeline):
        data = pipeline["data"]
        summary = (data / "report" / "summary.txt").read_text()
        assert "out-of-fold group: ensemble" in summary
        assert "missing artifacts" not in summary
        assert (data / "report" / "class_histogram.png").is_file()
        assert (data / "report" / "confusion_ensemble.png").is_file()


class TestPrepareAndDenoise:
    def test_prepare_from_imagefolder(self, pipeline, tmp_path):
        images = pipeline["data"] / "images"
        out = tmp_path / "prep"
        assert main(["prepare", "--out", str(out),
                     "--source", f"wbcbench_train={images}", *SHRINK]) == 0
        manifest = Manifest.load(out / "manifest.csv", default_registry())
        assert len(manifest) == 18
        assert manifest.fold_ids() == [0, 1, 2]
        for record in manifest.records[:3]:
            assert manifest.resolve_path(record).is_file()

    def test_prepare_no_folds_and_skip(self, pipeline, tmp_path):
        images = pipeline["data"] / "images"
        out = tmp_path / "prep"
        argv = ["prepare", "--out", str(out), "--no-folds",
                "--source", f"wbcbench_train={images}", *SHRINK]
        assert main(argv) == 0
        manifest = Manifest.load(out / "manifest.csv", default_registry())
        assert manifest.fold_ids() == []
        stamp = (out / "manifest.csv").stat().st_mtime_ns
        assert main(argv) == 0                          # idempotent skip
        assert (out / "manifest.csv").stat().st_mtime_ns == stamp

    def test_prepare_merges_existing_manifest(self, pipeline, tmp_path):
        out = tmp_path / "merged"
        assert main(["prepare", "--out", str(out), "--no-folds",
                     "--manifest", pipeline["manifest"], *SHRINK]) == 0
        manifest = Manifest.load(out / "manifest.csv", default_registry())
        assert len(manifest) == 18
        assert all(manifest.resolve_path(r).is_file() for r in manifest.records)

    def test_denoise_writes_copies_and_sigma(self, pipeline, tmp_path):
        out = tmp_path / "dn"
        assert main(["denoise", "--out", str(out),
                     "--manifest", pipeline["manifest"], "--limit", "4"]) == 0
        sigma_rows = (out / "sigma.csv").read_text().strip().splitlines()
        assert sigma_rows[0] == "sample_id,sigma_hat,bypassed"
        assert len(sigma_rows) == 5
        manifest = Manifest.load(out / "manifest.csv", default_registry())
        assert len(manifest) == 4
        for record in manifest.records:
            path = manifest.resolve_path(record)
            assert path.is_file()
            assert "denoised" in str(path)

    def test_denoise_disabled_is_config_error(self, pipeline, tmp_path):
        assert main(["denoise", "--out", str(tmp_path / "dn"),
                     "--manifest", pipeline["manifest"],
                     "--set", "denoise.enabled=false"]) == 1


class TestUsageErrors:
    def test_no_verb(self):
        assert main([]) == 1

    def test_unknown_verb(self):
        assert main(["conjure"]) == 1

    def test_missing_out(self):
        assert main(["synth-data"]) == 1

    def test_unknown_config_key(self, tmp_path):
        assert main(["synth-data", "--out", str(tmp_path),
                     "--set", "data.bogus=1"]) == 1

    def test_bad_source_format(self, tmp_path):
        assert main(["prepare", "--out", str(tmp_path), "--source", "notadir"]) == 1

    def test_unknown_source_name(self, tmp_path):
        assert main(["prepare", "--out", str(tmp_path),
                     "--source", f"mystery={tmp_path}"]) == 1

    def test_prepare_without_inputs(self, tmp_path):
        assert main(["prepare", "--out", str(tmp_path)]) == 1

    def test_report_on_missing_dir(self, tmp_path):
        assert main(["report", "--out", str(tmp_path / "ghost")]) == 1

    def test_version_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip()


class TestPipelineErrors:
    def test_infer_with_missing_grid(self, pipeline, tmp_path):
        assert main(["infer", "--out", str(tmp_path), "--manifest",
                     pipeline["manifest"], "--grid", str(tmp_path / "none"),
                     *SHRINK]) == 2

    def test_analyze_without_labeled_overlap(self, pipeline, tmp_path):
        ghost = LogitMatrix(("ghost.png",), default_registry().codes,
                            np.zeros((1, 13)))
        ghost.save(tmp_path / "logits.csv")
        assert main(["analyze", "--out", str(tmp_path / "an"), "--manifest",
                     pipeline["manifest"], "--logits",
                     str(tmp_path / "logits.csv"), *SHRINK]) == 2

    def test_train_on_unfolded_manifest(self, tmp_path):
        assert main(["synth-data", "--out", str(tmp_path / "d"), "--counts",
                     COUNTS, "--image-size", "16", *SHRINK]) == 0
        assert main(["train", "--out", str(tmp_path / "g"), "--manifest",
                     str(tmp_path / "d" / "manifest.csv"), *SHRINK]) == 2


class TestForce:
    def test_force_regenerates(self, tmp_path):
        argv = ["synth-data", "--out", str(tmp_path), "--counts", COUNTS,
                "--image-size", "12", *SHRINK]
        assert main(argv) == 0
        stamp = (tmp_path / "manifest.csv").stat().st_mtime_ns
        assert main(argv) == 0
        assert (tmp_path / "manifest.csv").stat().st_mtime_ns == stamp
        assert main(argv + ["--force"]) == 0
        assert (tmp_path / "manifest.csv").stat().st_mtime_ns > stamp
