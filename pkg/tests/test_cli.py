import json
from pathlib import Path

import numpy as np
import pytest

from attrbench import ale, synthgen
from attrbench.cli import main
from attrbench.volume import BinaryMask, read_nifti, write_nifti

SMOKE = {
    "seed": 11,
    "dataset": {"mode": "single", "dims": [16, 16, 16], "n": 40, "lesion_voxels": 30},
    "models": [{"family": "B", "channels": 2, "variant": "reduced2"}],
    "train": {"max_epochs": 2, "patience": 2, "folds": 2, "lr": 1e-3},
    "attribution": {"ig_steps": 4, "max_subjects_per_fold": 3},
    "svm": {"c_grid": [1e-3, 1.0]},
    "evaluation": {},
}


def _write_config(tmp_path, cfg, name="run.json"):
    p = Path(tmp_path) / name
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = _write_config(root, SMOKE)
    codes = [main(["pipeline", str(cfg), "--out", str(root / f"out{k}")]) for k in range(2)]
    runs = [next((root / f"out{k}").glob("run-*")) for k in range(2)]
    return codes, runs


def test_pipeline_succeeds_and_is_deterministic(smoke_runs):
    codes, runs = smoke_runs
    assert codes == [0, 0]
    manifests = [(r / "manifest.json").read_text() for r in runs]
    assert manifests[0] == manifests[1]
    files = json.loads(manifests[0])["files"]
    for name in ("heatmap_LRP.nii", "heatmap_IG.nii", "heatmap_GGC.nii", "heatmap_SVM.nii", "truth.nii",
                 "overlap_IG.json", "summary.json", "splits.json", "ModelB2l2_fold0.ckpt"):
        assert name in files


def test_overlap_grid_per_method(smoke_runs):
    run = smoke_runs[1][0]
    for m in ("LRP", "IG", "GGC", "SVM"):
        rep = json.loads((run / f"overlap_{m}.json").read_text())
        assert len(rep["dice"]) == 17 and all(len(row) == 50 for row in rep["dice"])


def test_report_lists_four_methods(smoke_runs, capsys):
    run = smoke_runs[1][0]
    assert main(["report", str(run)]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    for m in ("LRP", "IG", "GGC", "SVM"):
        assert sum(line.startswith(m) and "dice=" in line for line in lines) == 1
        assert f"{m}: grid 17 smoothings x 50 thresholds = 850 binary maps" in out


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "manifest" in capsys.readouterr().err


def test_report_detects_tampering(smoke_runs, tmp_path, capsys):
    import shutil

    run = tmp_path / "copy"
    shutil.copytree(smoke_runs[1][0], run)
    with open(run / "overlap_IG.json", "a") as fh:
        fh.write(" ")
    assert main(["report", str(run)]) == 3
    assert "overlap_IG.json" in capsys.readouterr().err


class TestConfigErrors:
    @pytest.mark.parametrize(
        "patch",
        [
            {"seed": None},
            {"seed": "7"},
            {"dataset": None},
            {"dataset": {"path": "does/not/exist"}},
            {"bogus": {}},
            {"models": []},
            {"models": [{"family": "Z", "channels": 2}]},
            {"train": {"patience": 0}},
            {"attribution": {"methods": ["occlusion"]}},
            {"ground_truth": {"source": "atlas"}},
        ],
    )
    def test_invalid_config_exits_2(self, tmp_path, patch):
        cfg = {**SMOKE, **patch}
        cfg = {k: v for k, v in cfg.items() if v is not None}
        assert main(["pipeline", str(_write_config(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 2
        assert not (tmp_path / "o").exists()

    def test_missing_run_file(self, tmp_path):
        assert main(["pipeline", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{seed: 1")
        assert main(["pipeline", str(p), "--out", str(tmp_path)]) == 2


def test_stage_failure_exits_3(tmp_path, capsys):
    mask = tmp_path / "wrong_grid.nii"
    write_nifti(BinaryMask(np.ones((4, 4, 4), bool), (2.8,) * 3).to_volume(), mask)
    cfg = {**SMOKE, "ground_truth": {"source": "mask", "path": str(mask)}}
    assert main(["pipeline", str(_write_config(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 3
    assert "ground-truth" in capsys.readouterr().err
    # partial artifacts are kept
    assert list((tmp_path / "o").glob("run-*/config.json"))


def test_stepwise_commands(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-synthetic", "--mode", "cohort", "--subjects", "4", "--images-per-subject", "6",
                 "--dims", "16", "16", "16", "--lesion-voxels", "30", "--seed", "2", "--out", str(data)]) == 0
    ds = synthgen.read_dataset(data)
    assert len(ds) == 24 and set(ds.subjects.tolist()) == {0, 1, 2, 3}

    ckpts = tmp_path / "ckpt"
    assert main(["train", "--data", str(data), "--family", "D", "--channels", "2", "--variant", "reduced2",
                 "--max-epochs", "1", "--folds", "2", "--seed", "1", "--out", str(ckpts)]) == 0
    report = json.loads((ckpts / "cv_report.json").read_text())
    assert report["model"] == "ModelD2l2" and len(report["fold_accuracy"]) == 2

    hm = tmp_path / "ig.nii"
    keep = tmp_path / "maps"
    assert main(["attribute", "--ckpt", str(ckpts / "ModelD2l2_fold0.ckpt"), "--method", "ig", "--steps", "2",
                 "--scans", str(data), "--keep-individual", str(keep), "--out", str(hm)]) == 0
    assert read_nifti(hm).dims == (16, 16, 16)
    assert len(list(keep.glob("IG_*.nii"))) == 24

    svm_map = tmp_path / "svm.nii"
    assert main(["svm", "--data", str(data), "--folds", "2", "--report", str(tmp_path / "svm.json"),
                 "--out", str(svm_map)]) == 0
    assert json.loads((tmp_path / "svm.json").read_text())["best_C"] > 0

    out = tmp_path / "eval" / "ig.json"
    assert main(["evaluate", "--heatmap", str(hm), "--truth", str(data / synthgen.MASK_FILE), "--method", "IG",
                 "--curves-fwhm", "4", "--out", str(out)]) == 0
    assert np.asarray(json.loads(out.read_text())["dice"]).shape == (17, 50)
    assert (tmp_path / "eval" / "ig_pr.csv").exists()


def test_ale_command(tmp_path):
    dims = (16, 16, 16)
    gm = BinaryMask(np.ones(dims, bool), (4.0,) * 3)
    write_nifti(gm.to_volume(), tmp_path / "gm.nii")
    table = ale.FociTable([ale.Focus(f"s{i}", 20, "c", 28.0, 28.0, 28.0) for i in range(8)])
    ale.write_foci(table, tmp_path / "foci.csv")
    out = tmp_path / "ale"
    assert main(["ale", "--foci", str(tmp_path / "foci.csv"), "--mask", str(tmp_path / "gm.nii"), "--n-perm", "100",
                 "--p-voxel", "0.01", "--out", str(out)]) == 0
    assert read_nifti(out / "ale_binary.nii").data[7, 7, 7] == 1
    assert json.loads((out / "clusters.json").read_text())["clusters"]


def test_bad_foci_file_exits_2(tmp_path):
    (tmp_path / "foci.csv").write_text("nope\n")
    write_nifti(BinaryMask(np.ones((4, 4, 4), bool), (4.0,) * 3).to_volume(), tmp_path / "gm.nii")
    assert main(["ale", "--foci", str(tmp_path / "foci.csv"), "--mask", str(tmp_path / "gm.nii"),
                 "--out", str(tmp_path / "o")]) == 2


def test_flags_from_config_file(tmp_path):
    cfg = _write_config(tmp_path, {"mode": "single", "n": 4, "dims": [16, 16, 16], "lesion_voxels": 30}, "gen.json")
    assert main(["gen-synthetic", "--config", str(cfg), "--n", "6", "--out", str(tmp_path / "d")]) == 0
    # the command line wins over the file
    assert len(synthgen.read_dataset(tmp_path / "d")) == 6


def test_threads_flag(tmp_path):
    assert main(["gen-synthetic", "--threads", "1", "--n", "2", "--dims", "16", "16", "16", "--lesion-voxels", "30",
                 "--out", str(tmp_path / "d")]) == 0
