import json
import subprocess
import sys

import numpy as np
import pytest

from dynrecon import cli, dataio
from dynrecon.trainer import load_scene


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("synth", "--spec", "one_mover", "--out", root, "--frames", 5, "--width", 24, "--height", 18) == 0
    return root


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run("train", "--preset", "tiny", "--data", small_data, "--out", out, "--threads", 1,
               "--set", "holdout_every=3")
    assert code == 0
    return out


def test_help_documents_every_flag():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.dest != "help":
                assert action.help, f"{name} {action.option_strings} has no help text"
    res = subprocess.run([sys.executable, "-m", "dynrecon.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout and "eval" in res.stdout


def test_synth_writes_loadable_dataset(small_data):
    ds = dataio.load_dataset(small_data)
    assert ds.n_frames == 5 and (ds.height, ds.width) == (18, 24)
    assert ds.gt_poses is not None and ds.gt_focal == 80.0
    assert (small_data / "scene.json").exists()


def test_preprocess_writes_masks(small_data, tmp_path):
    import shutil

    root = tmp_path / "d"
    shutil.copytree(small_data, root)
    for p in (root / "mask").iterdir():
        p.unlink()
    assert run("preprocess", "--data", root) == 0
    ds = dataio.load_dataset(root)
    assert ds.mask.shape == (5, 18, 24) and ds.mask.any()


def test_train_outputs(trained):
    assert (trained / "final.bin").exists() and (trained / "config.cfg").exists()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 20
    summary = json.loads((trained / "eval.json").read_text())
    assert {"psnr", "ssim", "ate", "focal"} <= set(summary)


def test_render_fix_view_sweep_time(trained, tmp_path):
    assert run("render", "--checkpoint", trained / "final.bin", "--out", tmp_path, "--fix-view", 1,
               "--sweep-time", "--n-times", 4, "--mask") == 0
    index = json.loads((tmp_path / "renders.json").read_text())
    assert len(index) == 4
    assert [r["time"] for r in index] == pytest.approx([0, 1 / 3, 2 / 3, 1])
    assert len(list(tmp_path.glob("view001_t*_mask.png"))) == 4


def test_render_at_training_view_matches_direct_render(trained, tmp_path):
    run("render", "--checkpoint", trained / "final.bin", "--out", tmp_path, "--fix-view", 2, "--sweep-time")
    scene, meta = load_scene(trained / "final.bin")
    import torch

    c2w = scene.cameras.c2w(torch.tensor([2]))[0].detach()
    direct = scene.render_image(c2w, meta["times"][2])["rgb"]
    img = dataio.read_image(tmp_path / "view002_t002.png")
    assert np.abs(img - np.clip(direct, 0, 1)).max() <= 0.5 / 255 + 1e-6


def test_interpolation_endpoints_and_count(trained, tmp_path):
    assert run("render", "--checkpoint", trained / "final.bin", "--out", tmp_path, "--fix-time", 0.5,
               "--interpolate-poses", 0, 4, "--n-views", 6) == 0
    index = json.loads((tmp_path / "renders.json").read_text())
    assert len(index) == 6
    scene, _ = load_scene(trained / "final.bin")
    world = scene.to_world_frame(scene.cameras.poses_numpy())
    np.testing.assert_allclose(index[0]["c2w"], world[0], atol=1e-6)
    np.testing.assert_allclose(index[-1]["c2w"], world[4], atol=1e-6)


def test_interpolate_poses_is_rigid_and_monotone():
    from scipy.spatial.transform import Rotation

    a, b = np.eye(4), np.eye(4)
    b[:3, :3] = Rotation.from_rotvec([0, 0.6, 0]).as_matrix()
    b[:3, 3] = [1, 0, 0]
    path = cli.interpolate_poses(a, b, 7)
    angles = Rotation.from_matrix(path[:, :3, :3]).magnitude()
    assert np.all(np.diff(angles) > 0)
    np.testing.assert_allclose(angles[3], 0.3, atol=1e-12)
    for P in path:
        np.testing.assert_allclose(P[:3, :3] @ P[:3, :3].T, np.eye(3), atol=1e-12)


def test_eval_reports_heldout(trained, small_data, tmp_path):
    out = tmp_path / "e.json"
    assert run("eval", "--checkpoint", trained / "final.bin", "--data", small_data, "--json", out) == 0
    res = json.loads(out.read_text())
    assert sorted(res["frames"]) == ["2"]
    assert 0 <= res["focal_rel_err"] < 1


def test_exit_codes(small_data, trained, tmp_path, capsys, monkeypatch):
    assert run("train", "--preset", "tiny", "--data", tmp_path / "missing", "--out", tmp_path / "o") == 2
    assert run("train", "--preset", "tiny", "--data", small_data, "--out", tmp_path / "o", "--set", "bogus=1") == 2
    assert run("render", "--checkpoint", trained / "final.bin", "--out", tmp_path, "--fix-view", 99,
               "--sweep-time") == 2
    with pytest.raises(SystemExit) as exc:
        run("render", "--checkpoint", trained / "final.bin", "--out", tmp_path, "--fix-view", 1)
    assert exc.value.code == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("eval", "--checkpoint", bad, "--data", small_data) == 2
    assert "error" in capsys.readouterr().err
    from dynrecon import trainer

    def boom(self, *a, **k):
        raise trainer.TrainingError("diverged")

    monkeypatch.setattr(trainer.Trainer, "train", boom)
    assert run("train", "--preset", "tiny", "--data", small_data, "--out", tmp_path / "o2") == 1
    assert "failed: diverged" in capsys.readouterr().err


def test_config_file_and_seed_override(small_data, tmp_path):
    from dynrecon import config

    cfg_path = tmp_path / "c.cfg"
    config.dump(config.preset("tiny", steps=2), cfg_path)
    assert run("train", "--config", cfg_path, "--data", small_data, "--out", tmp_path / "r", "--seed", 5) == 0
    used = config.load(tmp_path / "r" / "config.cfg")
    assert used.seed == 5 and used.steps == 2
