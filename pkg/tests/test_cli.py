import os
import re

import numpy as np
import pytest

from lidarchange.cli import build_parser, main
from lidarchange.detect import load_model
from lidarchange.io import (load_logodds, load_ply, load_session,
                            load_session_instances)

SMALL_CFG = """\
# small scene for CLI tests
world_size = 10.0
world_statics = 3
world_occluders = 1
world_changes = 1
sensor_channels = 16
sensor_hres_deg = 1.0
traj_frames = 4
seed = 6
n_pc = 1
n_nc = 2
pairs = 3
eval_pairs = 2
epochs = 3
class_rows_per_frame = 500
conf_pairs_per_frame = 300
report_timing = false
"""

NOCHANGE_CFG = """\
world_size = 10.0
world_statics = 3
world_occluders = 1
world_changes = 0
sensor_channels = 8
sensor_hres_deg = 2.0
traj_frames = 2
seed = 2
"""


def run(*args):
    return main([str(a) for a in args])


def must(*args):
    rc = run(*args)
    assert rc == 0, f"command failed ({rc}): {args}"


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """One full pipeline run; tests inspect its artifacts."""
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "small.cfg"
    cfg.write_text(SMALL_CFG)
    scene = base / "scene"
    must("--config", cfg, "synth", "--out", scene)
    prior = scene / "prior" / "manifest.txt"
    world = scene / "world.txt"
    must("--config", cfg, "build-map", "--session", prior,
         "--out", base / "map.ply")
    must("--config", cfg, "augment", "--session", prior, "--world", world,
         "--out", base / "db", "--pairs", "1")
    must("--config", cfg, "train", "--session", prior, "--world", world,
         "--out", base / "model.chmk")
    pair0 = base / "db" / "pair000"
    must("--config", cfg, "detect", "--method", "dualhead",
         "--model", base / "model.chmk", "--map", pair0 / "map.ply",
         "--scan", pair0 / "scan000.ply", "--out-scan", base / "pred.ply",
         "--out-map", base / "obs.ply")
    must("--config", cfg, "update", "--map", pair0 / "map.ply",
         "--obs", base / "obs.ply", "--state", base / "state.bin",
         "--out", base / "final.ply")
    must("--config", cfg, "eval", "--side", "scan", "--pred", base / "pred.ply",
         "--truth", pair0 / "scan000.ply", "--out", base / "scan_score.txt")
    must("--config", cfg, "eval", "--side", "map", "--truth", pair0 / "map.ply",
         "--state", base / "state.bin", "--out", base / "map_score.txt")
    must("--config", cfg, "perturb", "--session", prior, "--level", "0.5",
         "--out", base / "pert")
    return base


class TestChainArtifacts:
    def test_synth_layout(self, chain):
        scene = chain / "scene"
        assert (scene / "world.txt").exists()
        for part in ("prior", "current"):
            sess = load_session(scene / part / "manifest.txt")
            assert len(sess) == 4
            assert all(c.labels is not None for c, _, _ in sess.scans)
            iids = load_session_instances(scene / part / "manifest.txt")
            assert all(ids is not None for ids in iids)

    def test_build_map(self, chain):
        cloud = load_ply(chain / "map.ply")
        assert len(cloud) > 1000
        assert cloud.labels is not None and cloud.visibility is not None
        assert set(np.unique(cloud.visibility)) == {0}

    def test_augment_outputs(self, chain):
        db = chain / "db"
        assert (db / "index.txt").exists()
        pair0 = db / "pair000"
        poses = (pair0 / "poses.txt").read_text().splitlines()
        assert len(poses) == 4
        assert all(len(line.split()) == 12 for line in poses)
        pmap = load_ply(pair0 / "map.ply")
        assert set(np.unique(pmap.labels)) <= {0, 2}
        scan = load_ply(pair0 / "scan000.ply")
        assert set(np.unique(scan.labels)) <= {0, 1}

    def test_trained_model_loads(self, chain):
        model = load_model(chain / "model.chmk")
        assert model is not None

    def test_detect_outputs(self, chain):
        pred = load_ply(chain / "pred.ply")
        assert set(np.unique(pred.labels)) <= {0, 1}
        assert pred.confidences is not None
        assert pred.confidences.min() >= 0 and pred.confidences.max() <= 1
        obs = load_ply(chain / "obs.ply")
        assert len(obs) == len(load_ply(chain / "db" / "pair000" / "map.ply"))
        assert obs.labels is not None and obs.confidences is not None

    def test_update_state(self, chain):
        n = len(load_ply(chain / "db" / "pair000" / "map.ply"))
        state = load_logodds(chain / "state.bin", n)
        assert state.shape == (n, 3)
        assert len(load_ply(chain / "final.ply")) <= n

    def test_eval_score_lines(self, chain):
        assert re.fullmatch(r"iou=\d\.\d{6}\n",
                            (chain / "scan_score.txt").read_text())
        assert re.fullmatch(r"pr=\d\.\d{6} rr=\d\.\d{6} f1=\d\.\d{6}\n",
                            (chain / "map_score.txt").read_text())

    def test_perturb_moves_poses_not_points(self, chain):
        orig = load_session(chain / "scene" / "prior" / "manifest.txt")
        pert = load_session(chain / "pert" / "manifest.txt")
        moved = [not np.allclose(a[1].translation, b[1].translation)
                 for a, b in zip(orig.scans, pert.scans)]
        assert all(moved)
        a = (chain / "scene" / "prior" / "scan000.ply").read_bytes()
        b = (chain / "pert" / "scan000.ply").read_bytes()
        assert a == b

    def test_detect_rerun_byte_identical(self, chain):
        pair0 = chain / "db" / "pair000"
        must("--config", chain / "small.cfg", "detect", "--method", "dualhead",
             "--model", chain / "model.chmk", "--map", pair0 / "map.ply",
             "--scan", pair0 / "scan000.ply", "--out-scan", chain / "pred2.ply",
             "--out-map", chain / "obs2.ply")
        assert (chain / "pred.ply").read_bytes() == (chain / "pred2.ply").read_bytes()
        assert (chain / "obs.ply").read_bytes() == (chain / "obs2.ply").read_bytes()

    def test_sweep_csv(self, chain, capsys):
        must("--config", chain / "small.cfg", "sweep",
             "--out", chain / "report.csv", "--settings", "occupancy")
        out = capsys.readouterr().out
        text = (chain / "report.csv").read_text()
        header = "setting,voxel,noise_level,tau_scan,tau_map,iou,pr,rr,f1,ms_per_scan"
        assert text.splitlines()[0] == header
        assert len(text.splitlines()) == 2
        assert header in out
        must("--config", chain / "small.cfg", "sweep",
             "--out", chain / "report2.csv", "--settings", "occupancy")
        assert (chain / "report2.csv").read_text() == text

    def test_threads_env_fallback(self, chain, monkeypatch):
        monkeypatch.setenv("CHAMELION_THREADS", "2")
        must("--config", chain / "small.cfg", "build-map",
             "--session", chain / "scene" / "prior" / "manifest.txt",
             "--out", chain / "map_env.ply")
        assert (chain / "map_env.ply").read_bytes() == \
            (chain / "map.ply").read_bytes()


class TestExitCodes:
    def test_missing_input_is_2(self, tmp_path, capsys):
        rc = run("build-map", "--session", tmp_path / "nope.txt",
                 "--out", tmp_path / "m.ply")
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_config_error_is_3_with_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("voxel_size = 0.1\nwibble = 4\n")
        rc = run("--config", cfg, "synth", "--out", tmp_path / "s")
        assert rc == 3
        assert "line 2" in capsys.readouterr().err

    def test_config_bad_value_is_3(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("voxel_size = banana\n")
        rc = run("--config", cfg, "synth", "--out", tmp_path / "s")
        assert rc == 3
        assert "line 1" in capsys.readouterr().err

    def test_dualhead_without_model_is_2(self, chain, capsys):
        pair0 = chain / "db" / "pair000"
        rc = run("detect", "--method", "dualhead", "--map", pair0 / "map.ply",
                 "--scan", pair0 / "scan000.ply")
        assert rc == 2
        assert "model" in capsys.readouterr().err

    def test_bad_threads_env_is_1(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CHAMELION_THREADS", "lots")
        rc = run("synth", "--out", tmp_path / "s")
        assert rc == 1
        assert "CHAMELION_THREADS" in capsys.readouterr().err

    def test_pipeline_failure_is_1(self, chain, capsys):
        # observation cloud without label/confidence properties
        rc = run("update", "--map", chain / "map.ply",
                 "--obs", chain / "map.ply", "--state", chain / "junk.bin")
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestDeterminismAndSeeds:
    def test_synth_byte_identical(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(NOCHANGE_CFG)
        must("--config", cfg, "synth", "--out", tmp_path / "a")
        must("--config", cfg, "synth", "--out", tmp_path / "b")
        files = []
        for root, _, names in os.walk(tmp_path / "a"):
            for n in sorted(names):
                files.append(os.path.relpath(os.path.join(root, n),
                                             tmp_path / "a"))
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(NOCHANGE_CFG)
        must("--config", cfg, "synth", "--out", tmp_path / "a")
        must("--config", cfg, "--seed", "3", "synth", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "world.txt").read_text() != \
            (tmp_path / "b" / "world.txt").read_text()

    def test_hd_fraction_masks(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(NOCHANGE_CFG)
        must("--config", cfg, "synth", "--out", tmp_path / "s",
             "--hd-fraction", "0.2")
        manifest = tmp_path / "s" / "prior" / "manifest.txt"
        sess = load_session(manifest)
        assert any(m is not None and m.any() for m in sess.dynamic_masks)
        for (cloud, _, _), ids in zip(sess.scans,
                                      load_session_instances(manifest)):
            assert ids is not None and len(ids) == len(cloud)


class TestNoChangeWorld:
    def test_degenerate_metrics_score_one(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(NOCHANGE_CFG)
        must("--config", cfg, "synth", "--out", tmp_path / "scene")
        must("--config", cfg, "build-map",
             "--session", tmp_path / "scene" / "prior" / "manifest.txt",
             "--out", tmp_path / "map.ply")
        # the map against itself: no occupancy changes anywhere
        must("--config", cfg, "detect", "--method", "occupancy",
             "--map", tmp_path / "map.ply", "--scan", tmp_path / "map.ply",
             "--out-scan", tmp_path / "pred.ply",
             "--out-map", tmp_path / "obs.ply")
        must("--config", cfg, "update", "--map", tmp_path / "map.ply",
             "--obs", tmp_path / "obs.ply", "--state", tmp_path / "state.bin")
        capsys.readouterr()
        must("--config", cfg, "eval", "--side", "scan",
             "--pred", tmp_path / "pred.ply", "--truth", tmp_path / "map.ply")
        assert "iou=1.000000" in capsys.readouterr().out
        must("--config", cfg, "eval", "--side", "map",
             "--truth", tmp_path / "map.ply", "--state", tmp_path / "state.bin")
        assert "pr=1.000000 rr=1.000000 f1=1.000000" in capsys.readouterr().out


class TestHelp:
    def test_top_level_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("synth", "build-map", "augment", "train", "detect",
                    "update", "eval", "sweep", "perturb"):
            assert cmd in out

    def test_sweep_defaults_match_config(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["sweep", "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        assert "default 0.1" in out      # voxel_size default
        assert "default 0.5" in out      # tau_scan default
        assert "default 0.7" in out      # tau_map default

    def test_every_subcommand_has_help(self, capsys):
        parser = build_parser()
        sub = next(a for a in parser._actions
                   if isinstance(a, type(parser._subparsers._group_actions[0])))
        for name, sp in sub.choices.items():
            text = sp.format_help()
            assert "--" in text and name != ""
