from pathlib import Path

import pytest
import yaml

from clopasim.config import ConfigError, settings
from clopasim.experiment import ExperimentConfig
from clopasim.model import ParamGroupMode
from tests.conftest import write_experiment


def _load_with(tmp_path, **overrides):
    return ExperimentConfig.load(write_experiment(tmp_path, **overrides))


# --- loading ---

class TestLoad:
    def test_tiny_experiment(self, tmp_path):
        cfg = _load_with(tmp_path)
        assert cfg.task_spec == tmp_path / "task.yaml"
        assert [(a.name, a.mode) for a in cfg.algorithms] == [
            ("Frozen", ParamGroupMode.FROZEN),
            ("CLoPA-I.N", ParamGroupMode.INSTANCE_NORM_ONLY),
        ]
        assert cfg.model.num_stages == 2
        assert cfg.trainer.total_updates == 2
        assert (cfg.training_runs, cfg.inference_runs, cfg.eval_steps, cfg.master_seed) == (2, 2, 2, 3)
        assert cfg.output_dir == tmp_path / "out"
        assert cfg.runs_dir == tmp_path / "out" / "runs"

    def test_defaults(self, tmp_path):
        (tmp_path / "e.yaml").write_text(yaml.safe_dump({
            "task_spec": "t.yaml",
            "algorithms": [{"name": "A", "mode": "all"}],
        }))
        cfg = ExperimentConfig.load(tmp_path / "e.yaml")
        assert (cfg.training_runs, cfg.inference_runs, cfg.eval_steps) == (3, 3, 100)
        assert cfg.threads == 1
        assert cfg.compute_budget is None
        assert cfg.base.checkpoint is None and cfg.base.pretrain_task is None
        assert cfg.scheduler_config(40).min_cache == 10

    def test_seed_override(self, tmp_path):
        cfg = ExperimentConfig.load(write_experiment(tmp_path), seed=11)
        assert cfg.master_seed == 11

    def test_algorithm_lookup(self, tmp_path):
        cfg = _load_with(tmp_path)
        assert cfg.algorithm("Frozen").mode is ParamGroupMode.FROZEN
        with pytest.raises(KeyError):
            cfg.algorithm("LoRA")

    def test_compute_budget(self, tmp_path):
        assert _load_with(tmp_path, compute_budget=500).compute_budget == 500

    def test_base_paths_resolved(self, tmp_path):
        cfg = _load_with(tmp_path, base={"pretrain_task": "blob.yaml", "pretrain_epochs": 2})
        assert cfg.base.pretrain_task == tmp_path / "blob.yaml"
        assert cfg.base.pretrain_epochs == 2


class TestPrecedence:
    def test_out_setting_beats_file(self, tmp_path):
        settings.OUT_DIR = str(tmp_path / "elsewhere")
        assert _load_with(tmp_path).output_dir == tmp_path / "elsewhere"

    def test_env_beats_file(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CLOPA_OUT_DIR", str(tmp_path / "env"))
        monkeypatch.setenv("CLOPA_THREADS", "4")
        cfg = _load_with(tmp_path, threads=2)
        assert cfg.output_dir == tmp_path / "env"
        assert cfg.threads == 4

    def test_setting_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CLOPA_THREADS", "4")
        settings.THREADS = 3
        assert _load_with(tmp_path).threads == 3

    def test_file_threads(self, tmp_path):
        assert _load_with(tmp_path, threads=2).threads == 2

    def test_bad_env_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CLOPA_THREADS", "many")
        with pytest.raises(ConfigError) as info:
            _load_with(tmp_path)
        assert info.value.key == "threads"


# --- errors ---

class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.load(tmp_path / "absent.yaml")
        assert info.value.key == "config"

    def test_unparsable(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("task_spec: [unclosed\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(path)

    def test_not_a_mapping(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_mapping(["a"])

    @pytest.mark.parametrize("overrides, key", [
        ({"colour": "red"}, "colour"),
        ({"algorithms": []}, "algorithms"),
        ({"algorithms": [{"name": "A"}]}, "algorithms[0]"),
        ({"algorithms": [{"name": "A", "mode": "lora"}]}, "algorithms[0].mode"),
        ({"algorithms": [{"name": "A", "mode": "all"}, {"name": "A", "mode": "frozen"}]}, "algorithms"),
        ({"model": {"num_stages": 1}}, "model"),
        ({"model": {"depth": 3}}, "model"),
        ({"trainer": {"momentum": 0.9}}, "trainer.momentum"),
        ({"trainer": {"patch_extent": 7}}, "trainer.patch_extent"),
        ({"scheduler": {"k_d": 2.0}}, "scheduler.k_d"),
        ({"training_runs": 0}, "training_runs"),
        ({"eval_steps": "ten"}, "eval_steps"),
        ({"compute_budget": 0}, "compute_budget"),
        ({"debug": "yes"}, "debug"),
        ({"plot_size": "tiny"}, "plot_size"),
        ({"base": {"checkpoint": "a.clpa", "pretrain_task": "b.yaml"}}, "base"),
        ({"base": {"weights": "a"}}, "base.weights"),
        ({"base": {"pretrain_epochs": 0}}, "base.pretrain_epochs"),
    ])
    def test_invalid(self, tmp_path, overrides, key):
        with pytest.raises(ConfigError) as info:
            _load_with(tmp_path, **overrides)
        assert info.value.key == key

    def test_missing_task_spec(self):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.from_mapping({"algorithms": [{"name": "A", "mode": "all"}]}, Path("."))
        assert info.value.key == "task_spec"
