import json

import numpy as np
import pytest
from click.testing import CliRunner

from tracksfm.cli import main, prepare_scene
from tracksfm.geometry import load_reconstruction, save_reconstruction
from tracksfm.network import NetConfig
from tracksfm.scene import load_scene
from tracksfm.train import TrainConfig, load_checkpoint, save_checkpoint, train_loop

from conftest import gt_reconstruction


@pytest.fixture
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def synth_scene(runner, tmp_path, seed=3, **overrides):
    cfg = {"num_views": 6, "num_points": 40, "visibility": 0.9,
           "arc_degrees": 120.0, **overrides}
    tmp_path.mkdir(parents=True, exist_ok=True)
    cfg_path = tmp_path / "gen.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "scenes"
    run_ok(runner, ["synth", "--config", str(cfg_path), "--seed", str(seed),
                    "--out", str(out)])
    return out / "scene_000.json"


def tiny_train_config(tmp_path, epochs=3):
    cfg = TrainConfig(net=NetConfig(layers=1, d_p=8, d_v=16, d_s=8, d_g=16),
                      epochs=epochs, validate_every=2, seed=0)
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


class TestSynth:
    def test_writes_scene_and_manifest(self, runner, tmp_path):
        scene_path = synth_scene(runner, tmp_path)
        scene = load_scene(scene_path)
        assert scene.num_views == 6
        manifest = json.loads((scene_path.parent / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3
        assert str(scene_path) in manifest["outputs"]
        assert "generate" in manifest["timings"]

    def test_deterministic_outputs(self, runner, tmp_path):
        a = synth_scene(runner, tmp_path / "a")
        b = synth_scene(runner, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_flag_is_error(self, runner, tmp_path):
        result = runner.invoke(main, ["synth", "--nope", "--out", str(tmp_path)])
        assert result.exit_code == 2


class TestTrainCommand:
    def test_trains_and_checkpoints(self, runner, tmp_path):
        scene_path = synth_scene(runner, tmp_path)
        cfg_path = tiny_train_config(tmp_path)
        out = tmp_path / "run"
        result = run_ok(runner, ["train", "--config", str(cfg_path),
                                 "--scene", str(scene_path),
                                 "--val", str(scene_path), "--out", str(out)])
        assert "trained 3 iterations" in result.output
        ckpt = load_checkpoint(out / "checkpoint.bin")
        assert ckpt.iteration == 3
        assert (out / "best.bin").exists()
        assert (out / "manifest.json").exists()

    def test_resume_matches_straight_run(self, runner, tmp_path):
        scene_path = synth_scene(runner, tmp_path)
        out_a = tmp_path / "full"
        run_ok(runner, ["train", "--config", str(tiny_train_config(tmp_path, 4)),
                        "--scene", str(scene_path), "--out", str(out_a)])
        out_b = tmp_path / "half"
        run_ok(runner, ["train", "--config", str(tiny_train_config(tmp_path, 2)),
                        "--scene", str(scene_path), "--out", str(out_b)])
        out_c = tmp_path / "resumed"
        run_ok(runner, ["train", "--config", str(tiny_train_config(tmp_path, 4)),
                        "--scene", str(scene_path),
                        "--resume", str(out_b / "checkpoint.bin"),
                        "--out", str(out_c)])
        a = load_checkpoint(out_a / "checkpoint.bin")
        c = load_checkpoint(out_c / "checkpoint.bin")
        for name in a.param_values:
            np.testing.assert_array_equal(a.param_values[name], c.param_values[name])


class TestInferBaEval:
    @pytest.fixture
    def pipeline(self, runner, tmp_path):
        scene_path = synth_scene(runner, tmp_path)
        out = tmp_path / "run"
        run_ok(runner, ["train", "--config", str(tiny_train_config(tmp_path)),
                        "--scene", str(scene_path), "--out", str(out)])
        return scene_path, out / "checkpoint.bin"

    def test_infer_writes_recon_and_timings(self, runner, tmp_path, pipeline):
        scene_path, ckpt = pipeline
        out = tmp_path / "inf"
        run_ok(runner, ["infer", "--checkpoint", str(ckpt), "--scene",
                        str(scene_path), "--triangulate", "--out", str(out)])
        recon = load_reconstruction(out / "reconstruction.json")
        assert recon.num_views == 6
        manifest = json.loads((out / "manifest.json").read_text())
        assert "inference" in manifest["timings"]
        assert "triangulation" in manifest["timings"]

    def test_infer_does_not_mutate_checkpoint(self, runner, tmp_path, pipeline):
        scene_path, ckpt = pipeline
        before = ckpt.read_bytes()
        run_ok(runner, ["infer", "--checkpoint", str(ckpt), "--scene",
                        str(scene_path), "--out", str(tmp_path / "i2")])
        assert ckpt.read_bytes() == before

    def test_ba_does_not_mutate_input(self, runner, tmp_path, pipeline):
        scene_path, ckpt = pipeline
        inf_out = tmp_path / "i3"
        run_ok(runner, ["infer", "--checkpoint", str(ckpt), "--scene",
                        str(scene_path), "--triangulate", "--out", str(inf_out)])
        recon_path = inf_out / "reconstruction.json"
        before = recon_path.read_bytes()
        run_ok(runner, ["ba", "--scene", str(scene_path), "--recon",
                        str(recon_path), "--out", str(tmp_path / "ba3")])
        assert recon_path.read_bytes() == before

    def test_eval_ground_truth_is_zero(self, runner, tmp_path):
        """Evaluating the ground truth against itself prints zeros."""
        scene_path = synth_scene(runner, tmp_path)
        raw = load_scene(scene_path)
        recon_path = tmp_path / "gt.json"
        save_reconstruction(gt_reconstruction(raw), recon_path)
        out = tmp_path / "eval"
        result = run_ok(runner, ["eval", "--scene", str(scene_path),
                                 "--recon", str(recon_path), "--out", str(out)])
        row = result.output.splitlines()[-1].split()
        assert float(row[0]) == 0.0 and float(row[1]) == 0.0 and float(row[2]) == 0.0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["reprojection_px"] <= 1e-9
        assert metrics["rotation_deg"] <= 1e-9
        assert metrics["translation"] <= 1e-9

    def test_export_ply(self, runner, tmp_path):
        scene_path = synth_scene(runner, tmp_path)
        raw = load_scene(scene_path)
        recon_path = tmp_path / "gt.json"
        save_reconstruction(gt_reconstruction(raw), recon_path)
        ply = tmp_path / "cloud.ply"
        run_ok(runner, ["export", "--recon", str(recon_path), "--out", str(ply)])
        assert ply.read_bytes().startswith(b"ply")


class TestExitCodes:
    def test_validation_error_is_2(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        result = runner.invoke(main, ["eval", "--scene", str(bad),
                                      "--recon", str(bad)])
        assert result.exit_code == 2

    def test_numeric_failure_is_3(self, runner, tmp_path):
        scene_path = synth_scene(runner, tmp_path)
        scene = load_scene(scene_path)
        cfg = TrainConfig(net=NetConfig(layers=1, d_p=8, d_v=16, d_s=8, d_g=16),
                          epochs=1, seed=0)
        res = train_loop([prepare_scene(scene)[0]], [], cfg)
        ckpt = res.checkpoint
        ckpt.param_values["embed.w"][0, 0] = np.nan
        path = tmp_path / "bad.bin"
        save_checkpoint(ckpt, path)
        result = runner.invoke(main, ["infer", "--checkpoint", str(path),
                                      "--scene", str(scene_path),
                                      "--out", str(tmp_path / "o")])
        assert result.exit_code == 3

    def test_ba_nonconvergence_is_4(self, runner, tmp_path):
        """A reconstruction with a point sitting on a camera center makes
        the starting objective non-finite."""
        scene_path = synth_scene(runner, tmp_path)
        raw = load_scene(scene_path)
        recon = gt_reconstruction(raw)
        pts = recon.points.copy()
        pts[0] = recon.centers[0]
        recon.points = pts
        recon_path = tmp_path / "degenerate.json"
        save_reconstruction(recon, recon_path)
        result = runner.invoke(main, ["ba", "--scene", str(scene_path),
                                      "--recon", str(recon_path),
                                      "--out", str(tmp_path / "ba")])
        assert result.exit_code == 4
