import json
import subprocess
import sys

import numpy as np
import pytest

from stereodeblur.cli import main
from stereodeblur.fileio import read_pfm, read_png, write_png_rgb

TINY = {
    "synth": {"width": 32, "height": 32, "count": 4},
    "model": {"base_width": 4, "gate_width": 4, "depth_width": 4},
    "train": {"deblur_iters": 2, "disp_iters": 2, "joint_iters": 2, "crop_size": 16},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def test_full_pipeline(tmp_path, config, capsys):
    data, ckpt = tmp_path / "data", tmp_path / "ckpt"
    assert main(["synth", "--config", str(config), "--out", str(data), "--seed", "4"]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["generator"]["seed"] == 4

    assert main(["train", "--stage", "joint", "--data", str(data), "--config", str(config), "--out", str(ckpt)]) == 2
    for stage in ("deblur", "disp", "joint"):
        assert main(["train", "--stage", stage, "--data", str(data), "--config", str(config), "--out", str(ckpt)]) == 0
    assert (ckpt / "joint_final.npz").exists() and (ckpt / "joint_loss.csv").exists()

    report = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(ckpt / "joint_final.npz"), "--data", str(data), "--split", "test",
                 "--variant", "no_va", "--report", str(report)]) == 0
    assert json.loads(report.read_text())["variant"] == "no_va"
    assert main(["eval", "--ckpt", str(ckpt / "joint_final.npz"), "--data", str(data), "--split", "test",
                 "--variant", "no_context", "--report", str(report)]) == 2

    sample = data / "test" / "00003"
    out = tmp_path / "restored"
    assert main(["deblur", "--ckpt", str(ckpt / "joint_final.npz"), "--left", str(sample / "blurry_L.png"),
                 "--right", str(sample / "blurry_R.png"), "--out", str(out)]) == 0
    assert read_png(out / "restored_left.png", "RGB").shape == (32, 32, 3)
    assert read_pfm(out / "disp_right.pfm").shape == (32, 32)
    assert read_png(out / "gate_left.png", "L").shape == (8, 8)

    ablation = tmp_path / "ablation.json"
    assert main(["ablate", "--ckpt-dir", str(ckpt), "--data", str(data), "--report", str(ablation)]) == 0
    payload = json.loads(ablation.read_text())
    assert "no_context" in payload["skipped"] and "full" in payload["reports"]
    assert "| single |" in capsys.readouterr().out


def test_synth_twice_is_byte_identical(tmp_path, config):
    for name in ("a", "b"):
        assert main(["synth", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)


def test_exit_codes(tmp_path, config):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["train", "--stage", "deblur", "--data", str(tmp_path), "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    # missing dataset
    assert main(["train", "--stage", "deblur", "--data", str(tmp_path / "nope"), "--config", str(config),
                 "--out", str(tmp_path / "c")]) == 3
    (tmp_path / "junk.npz").write_bytes(b"junk")
    assert main(["eval", "--ckpt", str(tmp_path / "junk.npz"), "--data", str(tmp_path), "--report",
                 str(tmp_path / "r.json")]) == 3


def test_deblur_rejects_mismatched_views(tmp_path, config):
    data, ckpt = tmp_path / "data", tmp_path / "ckpt"
    main(["synth", "--config", str(config), "--out", str(data)])
    main(["train", "--stage", "deblur", "--data", str(data), "--config", str(config), "--out", str(ckpt)])
    write_png_rgb(tmp_path / "l.png", np.zeros((3, 16, 16)))
    write_png_rgb(tmp_path / "r.png", np.zeros((3, 16, 24)))
    assert main(["deblur", "--ckpt", str(ckpt / "deblur_pretrain_final.npz"), "--left", str(tmp_path / "l.png"),
                 "--right", str(tmp_path / "r.png"), "--out", str(tmp_path / "o")]) == 3


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "stereodeblur", "--help"], capture_output=True, text=True)
    assert result.returncode == 0
    for command in ("synth", "train", "eval", "deblur", "ablate"):
        assert command in result.stdout
