import json
import subprocess
import sys

import pytest

from anchorsplat.cli import main
from anchorsplat.data import load_dataset, read_pfm


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = write_json(root / "synth.json", {"n_gaussians": 6, "width": 24, "height": 24})
    train_cfg = write_json(root / "train.json", {"iterations": 30, "densify_freeze_iters": 10,
                                                 "densify_interval": 10, "eval_interval": 15,
                                                 "checkpoint_interval": 0, "n_basis": 5,
                                                 "init_stride": 3})
    assert main(["synth", "--out", str(root / "d"), "--motion", "global_shift", "--frames", "16",
                 "--config", synth_cfg]) == 0
    assert main(["train", "--data", str(root / "d"), "--out", str(root / "r"), "--config", train_cfg,
                 "--seed", "2"]) == 0
    return root, train_cfg


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_synth_train_eval_pipeline(workspace, capsys):
    root, _ = workspace
    ds = load_dataset(root / "d")
    assert len(ds.frames) == 16 and ds.test == [7, 15]
    assert (root / "d" / "truth.json").is_file()
    assert (root / "r" / "scene.ply").is_file() and (root / "r" / "metrics.csv").is_file()
    capsys.readouterr()
    assert main(["eval", "--data", str(root / "d"), "--model", str(root / "r")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "frame,psnr,ssim"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["7", "15", "mean"]
    assert all(0 < float(ln.split(",")[1]) < 99 for ln in lines[1:])


def test_render_writes_color_and_depth(workspace):
    root, _ = workspace
    out = root / "frames"
    assert main(["render", "--data", str(root / "d"), "--model", str(root / "r"), "--out", str(out),
                 "--frames", "0,7", "--format", "ppm"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["000000_color.ppm", "000000_depth.pfm", "000007_color.ppm", "000007_depth.pfm",
                     "manifest.json"]
    assert read_pfm(out / "000007_depth.pfm").shape == (24, 24)


def test_manifest_is_deterministic(workspace, tmp_path):
    root, train_cfg = workspace
    m = json.loads((root / "r" / "manifest.json").read_text())
    assert m["command"] == "train" and m["seed"] == 2
    assert m["config"]["lr_initial"] == 1.6e-3 and m["config"]["seed"] == 2
    assert "engine_version" in m and not {"time", "timestamp", "date", "created"} & set(m)
    argv = ["train", "--data", str(root / "d"), "--out", str(tmp_path / "again"), "--config", train_cfg,
            "--seed", "2"]
    assert main(argv) == 0
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again["config"] == m["config"]
    assert (tmp_path / "again" / "scene.ply").read_bytes() == (root / "r" / "scene.ply").read_bytes()
    assert (tmp_path / "again" / "deformation.bin").read_bytes() == (root / "r" / "deformation.bin").read_bytes()


def test_ablation_flags_reach_config(workspace, tmp_path):
    root, train_cfg = workspace
    out = tmp_path / "gs"
    assert main(["train", "--data", str(root / "d"), "--out", str(out), "--config", train_cfg,
                 "--deform-backend", "gs", "--anchors", "0", "--iterations", "12"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["deform_backend"] == "gs" and cfg["anchors"] == 0 and cfg["iterations"] == 12
    header = (out / "scene.ply").read_bytes()[:2000]
    assert b"anchor_0" not in header


def test_missing_dataset_is_validation_error(tmp_path, capsys):
    missing = tmp_path / "no_such_dataset"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "r")]) == 1
    err = error_line(capsys)
    assert err["exit_code"] == 1 and str(missing) in err["message"]


@pytest.mark.parametrize("argv", [
    ["train", "--data", "x", "--out", "y", "--learning-rate", "1"],
    ["paint"],
    ["synth"],
    ["synth", "--out", "o", "--motion", "wobble"],
])
def test_bad_flags_exit_one(argv, capsys):
    assert main(argv) == 1
    assert error_line(capsys)["exit_code"] == 1


def test_bad_config_keys_exit_one(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = write_json(tmp_path / "c.json", {"iterations": 5, "lr": 1.0})
    assert main(["train", "--data", str(root / "d"), "--out", str(tmp_path / "r"), "--config", cfg]) == 1
    assert "lr" in error_line(capsys)["message"]
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(tmp_path / "broken.json")]) == 1
    assert "broken.json" in error_line(capsys)["message"]


def test_runtime_failure_exits_two(workspace, tmp_path, capsys):
    root, train_cfg = workspace
    (tmp_path / "model").mkdir()
    (tmp_path / "model" / "scene.ply").write_bytes(b"ply\ngarbage")
    (tmp_path / "model" / "deformation.bin").write_bytes(b"\x00")
    assert main(["eval", "--data", str(root / "d"), "--model", str(tmp_path / "model")]) == 2
    assert error_line(capsys)["exit_code"] == 2


def test_gradcheck_prints_table(capsys, tmp_path):
    assert main(["gradcheck", "--seed", "3", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["class", "max_rel_error", "status"]
    assert len(out) == 12 and all(ln.endswith("ok") for ln in out[1:])
    errors = json.loads((tmp_path / "manifest.json").read_text())["config"]["errors"]
    assert max(errors.values()) <= 1e-4


def test_gradcheck_failure_exit_code(capsys):
    assert main(["gradcheck", "--seed", "3", "--tolerance", "1e-30"]) == 2
    assert "seed 3" in error_line(capsys)["message"]


def test_module_entry_point_and_log_level(tmp_path):
    env = {"COLORGS_LOG": "DEBUG", "PATH": ""}
    r = subprocess.run([sys.executable, "-m", "anchorsplat", "train", "--data", str(tmp_path / "none"),
                        "--out", str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert r.returncode == 1
    assert json.loads(r.stderr.strip().splitlines()[-1])["error"] == "DatasetError"
    r = subprocess.run([sys.executable, "-m", "anchorsplat", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
