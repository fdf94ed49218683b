from pathlib import Path

import numpy as np
import pytest
import yaml

from clopasim.cli import main
from clopasim.config import settings
from clopasim.ledger import ledger
from clopasim.model import ModelConfig, build_model
from clopasim.trainer import TrainConfig
from clopasim.volume import LabelledSample

FIXTURES = Path(__file__).parent / "fixtures"

TINY_MODEL = ModelConfig(num_stages=2, base_channels=2)


@pytest.fixture(autouse=True)
def _reset_globals():
    ledger.reset()
    settings.reset()
    yield
    ledger.reset()
    settings.reset()


@pytest.fixture(autouse=True)
def _no_env_overrides(monkeypatch):
    monkeypatch.delenv("CLOPA_OUT_DIR", raising=False)
    monkeypatch.delenv("CLOPA_THREADS", raising=False)


@pytest.fixture
def tiny_store():
    return build_model(TINY_MODEL, seed=0)


@pytest.fixture
def tiny_trainer():
    return TrainConfig(epochs=2, updates_per_epoch=2, batch_size=2, interaction_steps=2, patch_extent=8)


def cube_sample(sample_id: int = 0, extent: int = 8, lo: int = 2, hi: int = 5, seed: int = 0) -> LabelledSample:
    """A bright cube on a noisy background."""
    rng = np.random.default_rng(seed)
    label = np.zeros((extent,) * 3, dtype=bool)
    label[lo:hi, lo:hi, lo:hi] = True
    image = (2.0 * label + 0.3 * rng.normal(size=label.shape)).astype(np.float32)
    return LabelledSample(sample_id, image, label)


def write_experiment(tmp_path: Path, **overrides) -> Path:
    """A tiny blob experiment: 16^3 volumes, 8 samples, 2-stage model, few updates."""
    task = {
        "name": "tiny_blob",
        "geometry": "blob",
        "extents": [16, 16, 16],
        "dataset_size": 8,
        # stands in for a calibrated value
        "expert_threshold": 0.5,
    }
    (tmp_path / "task.yaml").write_text(yaml.safe_dump(task))
    config = {
        "task_spec": "task.yaml",
        "algorithms": [
            {"name": "Frozen", "mode": "frozen"},
            {"name": "CLoPA-I.N", "mode": "clopa-in"},
        ],
        "model": {"num_stages": 2, "base_channels": 2},
        "trainer": {"epochs": 1, "updates_per_epoch": 2, "interaction_steps": 2, "patch_extent": 8},
        # four training samples trigger episodes at cache sizes 2 and 4
        "scheduler": {"k_m": 0.5},
        "training_runs": 2,
        "inference_runs": 2,
        "eval_steps": 2,
        "master_seed": 3,
        "output_dir": "out",
    }
    config.update(overrides)
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


@pytest.fixture(scope="session")
def finished_experiment(tmp_path_factory) -> Path:
    """generate, run and report once for the whole session; treat as read-only."""
    path = write_experiment(tmp_path_factory.mktemp("finished"))
    for command in ("generate", "run", "report"):
        assert main([command, "--config", str(path)]) == 0
    settings.reset()
    ledger.reset()
    return path
