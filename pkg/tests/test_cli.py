import csv
import json

import pytest
from PIL import Image

from icongan.cli import main
from icongan.data import MANIFEST_NAME

TINY_CONFIG = {
    "model": {"base_width": 4, "max_width": 8, "d_base_width": 4, "d_max_width": 8, "z_dim": 8,
              "embed_dim": 8, "w_dim": 8, "app_feature_dim": 8, "patch_feature_dim": 8},
    "train": {"batch_size": 8, "total_images": 800, "checkpoint_every": 50, "sample_every": 50,
              "dtype": "float64"},
}


def run(argv, capsys=None):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as e:  # argparse usage errors
        code = e.code
    return code


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--out", root / "data", "--apps", 3, "--themes", 4, "--res", 32,
                "--dropout", 0.2, "--seed", 0]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY_CONFIG))
    assert run(["train", "--data", root / "data", "--config", root / "tiny.json", "--out", root / "run",
                "--max-steps", 100]) == 0
    return root


def test_synth_outputs_and_idempotence(tmp_path):
    assert run(["synth", "--out", tmp_path / "a", "--apps", 2, "--themes", 3, "--res", 32]) == 0
    assert run(["synth", "--out", tmp_path / "b", "--apps", 2, "--themes", 3, "--res", 32]) == 0
    assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()
    for p in (tmp_path / "a" / "icons").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / "icons" / p.name).read_bytes()
    assert json.loads((tmp_path / "a" / "run_config.json").read_text())["command"] == "synth"


def test_synth_dropout_out_of_range(tmp_path):
    assert run(["synth", "--out", tmp_path, "--dropout", 0.5]) == 2


def test_train_outputs(workdir):
    run_dir = workdir / "run"
    with open(run_dir / "steplog.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 100 and rows[-1]["step"] == "100"
    assert (run_dir / "checkpoints" / "latest.pt").exists()
    assert (run_dir / "checkpoints" / "ckpt_000050.pt").exists()
    assert (run_dir / "samples" / "step_000100.png").exists()
    assert (run_dir / "loss_curves.png").exists()
    assert json.loads((run_dir / "config.json").read_text())["model"]["num_apps"] == 3


def test_train_resume_matches_uninterrupted(workdir):
    args = ["train", "--data", workdir / "data", "--config", workdir / "tiny.json"]
    assert run(args + ["--out", workdir / "half", "--max-steps", 50]) == 0
    assert run(args + ["--out", workdir / "half", "--max-steps", 100,
                       "--resume", workdir / "half" / "checkpoints" / "latest.pt"]) == 0
    full = (workdir / "run" / "steplog.csv").read_text().splitlines()
    resumed = (workdir / "half" / "steplog.csv").read_text().splitlines()
    assert resumed[51:] == full[51:] and len(resumed) == 101


def test_train_usage_errors(workdir, tmp_path):
    assert run(["train", "--out", tmp_path]) == 2
    assert run(["train", "--data", workdir / "data", "--config", workdir / "tiny.json", "--out", tmp_path,
                "--set", "loss.t=3", "--resume", workdir / "run" / "checkpoints" / "latest.pt"]) == 2
    assert run(["train", "--data", workdir / "data", "--out", tmp_path, "--set", "model.grid_side=4"]) == 2
    assert run(["train", "--data", workdir / "data", "--out", tmp_path, "--set", "nope.key=1"]) == 2


def test_train_missing_data_is_runtime_failure(tmp_path):
    assert run(["train", "--data", tmp_path / "absent", "--out", tmp_path / "o"]) == 1


def test_sample_grid_and_determinism(workdir, capsys):
    ckpt = workdir / "run" / "checkpoints" / "latest.pt"
    a, b = workdir / "s1.png", workdir / "s2.png"
    assert run(["sample", "--ckpt", ckpt, "--app", 1, "--theme", 2, "--n", 8, "--seed", 3, "--out", a]) == 0
    assert run(["sample", "--ckpt", ckpt, "--app", 1, "--theme", 2, "--n", 8, "--seed", 3, "--out", b]) == 0
    assert a.read_bytes() == b.read_bytes()
    with Image.open(a) as im:
        assert im.mode == "RGBA"
        w, h = im.size
    # 1 x 8 layout with 2 px padding
    assert (w, h) == (8 * 34 + 2, 34 + 2)
    assert run(["sample", "--ckpt", ckpt, "--app", 1, "--theme", 2, "--n", 8, "--grid", "2x4",
                "--out", workdir / "s3.png"]) == 0
    with Image.open(workdir / "s3.png") as im:
        assert im.size == (4 * 34 + 2, 2 * 34 + 2)


def test_sample_unseen_pair_warns(workdir, capsys):
    from icongan.data import load_manifest
    present = set(load_manifest(workdir / "data").pairs())
    missing = next((a, t) for a in range(3) for t in range(4) if (a, t) not in present)
    capsys.readouterr()
    code = run(["sample", "--ckpt", workdir / "run" / "checkpoints" / "latest.pt", "--app", missing[0],
                "--theme", missing[1], "--n", 2, "--out", workdir / "unseen.png"])
    assert code == 0
    assert "not in the training data" in capsys.readouterr().err


def test_sample_label_out_of_range(workdir):
    assert run(["sample", "--ckpt", workdir / "run" / "checkpoints" / "latest.pt", "--app", 9, "--theme", 0,
                "--out", workdir / "x.png"]) == 2


def test_eval_requires_aux_then_runs(workdir, capsys):
    ckpt = workdir / "run" / "checkpoints" / "latest.pt"
    capsys.readouterr()
    assert run(["eval", "--ckpt", ckpt, "--data", workdir / "data", "--out", workdir / "m.json"]) == 2
    assert "icongan aux" in capsys.readouterr().err
    assert run(["eval", "--ckpt", ckpt, "--data", workdir / "data", "--metrics", "acc,bogus"]) == 2
    assert "acc, fid, is, lpips, disent" in capsys.readouterr().err
    assert run(["aux", "--data", workdir / "data", "--floor", 0.0]) == 0
    assert run(["eval", "--ckpt", ckpt, "--data", workdir / "data", "--metrics", "acc,fid,disent",
                "--out", workdir / "m.json"]) == 0
    report = json.loads((workdir / "m.json").read_text())
    assert 0 <= report["top1_app"] <= report["top5_app"] <= 1
    assert report["fid_all"] >= 0
    assert (workdir / "m.png").exists()


def test_features_export(workdir):
    ckpt = workdir / "run" / "checkpoints" / "latest.pt"
    out1, out2 = workdir / "f1", workdir / "f2"
    assert run(["features", "--ckpt", ckpt, "--data", workdir / "data", "--out", out1]) == 0
    assert run(["features", "--ckpt", ckpt, "--data", workdir / "data", "--out", out2]) == 0
    n_icons = sum(1 for _ in open(workdir / "data" / MANIFEST_NAME)) - 1
    for name in ("app_features.csv", "theme_features.csv"):
        rows = (out1 / name).read_text().splitlines()
        assert len(rows) == n_icons + 1
        assert len(rows[0].split(",")) == 4 + 8
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_features_shape_mismatch(workdir, tmp_path):
    assert run(["synth", "--out", tmp_path / "other", "--apps", 2, "--themes", 2, "--res", 32]) == 0
    assert run(["features", "--ckpt", workdir / "run" / "checkpoints" / "latest.pt",
                "--data", tmp_path / "other", "--out", tmp_path / "f"]) == 2


def test_version_and_unknown_command(capsys):
    assert run(["--version"]) == 0
    assert run(["frobnicate"]) == 2
