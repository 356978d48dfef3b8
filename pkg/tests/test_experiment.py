import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from owdet.experiment import (ConfigError, ExperimentConfig, default_config, load_config,
                              parse_config, parse_sweep, run_ablation, run_experiment,
                              run_sweep, sweep_config, write_run)
from owdet.losses import LossWeights
from owdet.matching import PseudoConfig
from owdet.sim import TrainConfig, WorldConfig

TINY_INI = """
[world]
num_tasks = 2
classes_per_task = 3
d_in = 16
scenes_per_task = 15
test_scenes = 8
n_exemplar = 2
[frame]
k = 16
d = 32
[train]
steps = 20
replay_steps = 10
log_every = 5
"""


@pytest.fixture(scope="module")
def tiny():
    return parse_config(TINY_INI, base=default_config())


def read_dir(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir()) if p.is_file()}


class TestConfig:
    def test_defaults_match_dataclasses(self):
        cfg = default_config()
        assert cfg.world == WorldConfig()
        assert cfg.train == TrainConfig()
        assert cfg.losses == LossWeights()
        assert cfg.pseudo == PseudoConfig()
        assert cfg == ExperimentConfig()

    def test_reference_hyperparameters(self):
        cfg = default_config()
        assert (cfg.frame.k, cfg.frame.d) == (128, 256)
        assert cfg.losses.w_eus == 1.0 and cfg.losses.w_ekd == 1.0
        assert cfg.losses.margin == 0.5
        assert cfg.pseudo.tau == 20 and cfg.pseudo.size_ratio == 0.5
        assert cfg.inference.score_threshold == 0.10 and cfg.inference.nms_iou == 0.6
        assert cfg.train.eus_enabled and cfg.train.ekd_enabled

    def test_overlay(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[ablation]\neus_enabled = false\n[losses]\nmargin = 1.0\n"
                        "[world]\nobj_side = 0.1, 0.5\n[output]\ndir = somewhere\n")
        cfg = load_config(path)
        assert not cfg.train.eus_enabled and cfg.train.ekd_enabled
        assert cfg.losses.margin == 1.0 and cfg.losses.w_cls == 2.0
        assert cfg.world.obj_side == (0.1, 0.5)
        assert cfg.out_dir == "somewhere"

    @pytest.mark.parametrize("text", [
        "[bogus]\nx = 1\n",
        "[world]\nnot_a_key = 1\n",
        "[world]\nnoise = loud\n",
        "[ablation]\neus_enabled = maybe\n",
        "[frame]\nk = 7\n",
        "[frame]\nk = 64\nd = 32\n",
        "[losses]\nmargin = -1\n",
        "[train]\neus_enabled = false\n",
        "no section header\n",
    ])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text, base=default_config())

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_hash(self, tiny):
        assert tiny.hash() == parse_config(TINY_INI, base=default_config()).hash()
        assert tiny.hash() != tiny.with_seed(9).hash()
        assert tiny.hash() == replace(tiny, out_dir="elsewhere").hash()

    def test_sweep_parse(self):
        assert parse_sweep("m=0.25,0.5,1.0") == ("m", [0.25, 0.5, 1.0])
        assert parse_sweep("k=32,64,128") == ("k", [32, 64, 128])
        for bad in ("x=1", "m", "m=", "k=a"):
            with pytest.raises(ConfigError):
                parse_sweep(bad)

    def test_sweep_config(self, tiny):
        assert sweep_config(tiny, "m", 0.25).losses.margin == 0.25
        assert sweep_config(tiny, "k", 8).frame.k == 8
        with pytest.raises(ConfigError):
            sweep_config(tiny, "k", 64)  # exceeds d = 32


class TestRun:
    def test_outputs(self, tiny, tmp_path):
        res = run_experiment(tiny, tmp_path)
        assert [r.task for r in res.reports] == [1, 2]
        names = set(read_dir(tmp_path))
        for t in (1, 2):
            assert {f"report_task{t}.json", f"heatmap_task{t}.csv", f"class_scores_task{t}.csv",
                    f"detections_task{t}.jsonl", f"pca_task{t}.csv"} <= names
        assert {"train_log.csv", "summary.csv", "manifest.json", "frame.npy"} <= names
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config_hash"] == tiny.hash() and manifest["seed"] == tiny.seed
        import hashlib
        for name, digest in manifest["files"].items():
            assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest
        header = (tmp_path / "summary.csv").read_text().splitlines()[0]
        assert header == "task,previous_map,current_map,known_map,u_recall,h_score"
        np.testing.assert_array_equal(np.load(tmp_path / "frame.npy").shape, (16, 32))

    def test_byte_identical(self, tiny, tmp_path):
        run_experiment(tiny, tmp_path / "a")
        run_experiment(tiny, tmp_path / "b")
        assert read_dir(tmp_path / "a") == read_dir(tmp_path / "b")

    def test_seed_changes_outputs(self, tiny, tmp_path):
        run_experiment(tiny, tmp_path / "a")
        run_experiment(tiny.with_seed(5), tmp_path / "b")
        a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
        assert a["report_task1.json"] != b["report_task1.json"]

    def test_eus_off_skips_subspace_terms(self, tiny):
        res = run_experiment(tiny.with_flags(False, True), keep_outputs=False)
        assert all(r["energy"] == 0 and r["subspace"] == 0 for r in res.log_rows)

    def test_unwritable_output(self, tiny, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        res = run_experiment(tiny, keep_outputs=True)
        with pytest.raises(OSError):
            write_run(res, blocker / "sub")


class TestAblation:
    def test_grid(self, tiny, tmp_path):
        grid = run_ablation(tiny, tmp_path)
        assert sorted(grid) == [(False, False), (False, True), (True, False), (True, True)]
        plain = run_experiment(tiny.with_flags(False, False), keep_outputs=False)
        assert [r.to_json() for r in grid[(False, False)].reports] == \
            [r.to_json() for r in plain.reports]
        rows = (tmp_path / "ablation.csv").read_text().splitlines()
        assert rows[0].startswith("eus,ekd,task") and len(rows) == 1 + 4 * 2

    def test_parallel_matches_sequential(self, tiny, tmp_path):
        run_ablation(tiny, tmp_path / "seq")
        run_ablation(tiny, tmp_path / "par", parallel=2)
        assert (tmp_path / "seq" / "ablation.csv").read_bytes() == \
            (tmp_path / "par" / "ablation.csv").read_bytes()

    def test_sweep(self, tiny, tmp_path):
        res = run_sweep(tiny, "k", [8, 16], tmp_path)
        assert sorted(res) == [8, 16]
        assert res[8].config.frame.k == 8
        assert (tmp_path / "sweep.csv").read_text().startswith("k,task")
