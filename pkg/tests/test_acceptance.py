"""Desk-scale adaptation effect on the shipped branching-tree experiment.

These run the full generate, calibrate and run pipeline three times and
take well over the default test budget; select them with ``pytest -m slow``.
"""

import shutil
from dataclasses import dataclass
from pathlib import Path

import pytest
import yaml

from clopasim.cli import EXIT_OK, main
from clopasim.commands import algorithm_trajectories, collect
from clopasim.evaluation import episodic_summary
from clopasim.experiment import ExperimentConfig

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
MASTER_SEEDS = (0, 1, 2)
MIN_GAIN = 0.05


@dataclass
class Outcome:
    frozen: float
    adapted: float
    base: float
    first_episode: float
    final: float


def _experiment(root: Path) -> Path:
    shutil.copytree(CONFIGS, root / "configs")
    path = root / "configs" / "experiment.yaml"
    data = yaml.safe_load(path.read_text())
    data["algorithms"] = [{"name": "Frozen", "mode": "frozen"}, {"name": "CLoPA-I.N", "mode": "clopa-in"}]
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


@pytest.fixture(scope="module")
def outcomes(tmp_path_factory) -> dict[int, Outcome]:
    results = {}
    for seed in MASTER_SEEDS:
        path = _experiment(tmp_path_factory.mktemp(f"seed_{seed}"))
        for command in ("generate", "calibrate", "run"):
            assert main([command, "--config", str(path), "--seed", str(seed)]) == EXIT_OK
        collected = collect(ExperimentConfig.load(path, seed=seed))
        frozen, adapted = collected.algorithms
        final_dice = {
            a.name: episodic_summary(a.final_series(), collected.threshold).as_dict()["dice_final"]
            for a in (frozen, adapted)
        }
        trajectory = algorithm_trajectories(adapted, collected.threshold, collected.stream_length)["dice_final"]
        first = trajectory.episode_points[0]
        results[seed] = Outcome(
            frozen=final_dice["Frozen"],
            adapted=final_dice["CLoPA-I.N"],
            base=float(trajectory.values[0]),
            first_episode=trajectory.at(first + 1),
            final=float(trajectory.values[-1]),
        )
    return results


class TestAdaptationEffect:
    def test_instance_norm_tuning_beats_frozen(self, outcomes):
        held = [o.adapted - o.frozen >= MIN_GAIN for o in outcomes.values()]
        assert sum(held) >= 2, outcomes

    def test_first_episode_carries_most_of_the_gain(self, outcomes):
        held = [o.first_episode - o.base >= 0.5 * (o.final - o.base) for o in outcomes.values()]
        assert sum(held) >= 2, outcomes
