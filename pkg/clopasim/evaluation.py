"""Per-step segmentation metrics, episodic summaries and trajectories.

Metric definitions follow the interactive-segmentation evaluation
protocol: Dice and normalised surface Dice at every interaction step,
trapezoidal interaction-normalised AUCs, number of interactions to an
expert-level Dice threshold, and expected-performance trajectories over
the number of received training samples.
"""

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class ExtentMismatchError(ValueError):
    pass


def _check_extents(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ExtentMismatchError(f"mask extents differ: {a.shape} vs {b.shape}")


# --- per-mask metrics ---


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a∧b| / (|a|+|b|); two empty masks score 1."""
    _check_extents(a, b)
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_faces(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Physical centres of all faces separating foreground from background.

    Voxels outside the grid count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    spacing = np.asarray(spacing, dtype=np.float64)
    centres = []
    for axis in range(mask.ndim):
        pad = [(0, 0)] * mask.ndim
        pad[axis] = (1, 1)
        padded = np.pad(mask, pad)
        boundary = np.diff(padded.astype(np.int8), axis=axis) != 0
        idx = np.argwhere(boundary).astype(np.float64)
        # diff index j sits between original voxels j-1 and j
        idx[:, axis] -= 0.5
        centres.append(idx * spacing)
    return np.concatenate(centres, axis=0)


def nsd(a: np.ndarray, b: np.ndarray, tolerance: float, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Normalised surface Dice at a physical tolerance."""
    _check_extents(a, b)
    faces_a = surface_faces(a, spacing)
    faces_b = surface_faces(b, spacing)
    if len(faces_a) == 0 and len(faces_b) == 0:
        return 1.0
    if len(faces_a) == 0 or len(faces_b) == 0:
        return 0.0
    dist_ab, _ = cKDTree(faces_b).query(faces_a, k=1)
    dist_ba, _ = cKDTree(faces_a).query(faces_b, k=1)
    close = int((dist_ab <= tolerance).sum()) + int((dist_ba <= tolerance).sum())
    return close / (len(faces_a) + len(faces_b))


# --- per-series metrics ---


def nauc(series: Sequence[float], steps: int) -> float:
    """Trapezoidal area over steps 0..S divided by S."""
    values = np.asarray(series, dtype=np.float64)
    if steps == 0:
        return float(values[0])
    if len(values) != steps + 1:
        raise ValueError(f"series has {len(values)} values, expected {steps + 1}")
    return float(np.trapezoid(values) / steps)


@dataclass(frozen=True)
class NoiResult:
    noi: int
    failed: bool
    steps: int

    @property
    def nnoi(self) -> float:
        return 100.0 * self.noi / self.steps if self.steps else 0.0


def noi(dice_series: Sequence[float], threshold: float, steps: int) -> NoiResult:
    """First step whose Dice reaches the threshold; S and failed otherwise."""
    values = np.asarray(dice_series, dtype=np.float64)
    hits = np.flatnonzero(values >= threshold)
    if len(hits) == 0:
        return NoiResult(noi=steps, failed=True, steps=steps)
    return NoiResult(noi=int(hits[0]), failed=False, steps=steps)


# --- per-sample and episodic aggregation ---


@dataclass
class MetricSeries:
    sample_id: int
    dice: list[float]
    nsd: list[float]

    @property
    def steps(self) -> int:
        return len(self.dice) - 1


SUMMARY_METRICS = ("dice_init", "dice_final", "dice_nauc", "nsd_init", "nsd_final", "nsd_nauc", "nnoi", "nof")


@dataclass
class SampleScores:
    """Run-averaged scalar metrics of one test sample."""

    sample_id: int
    values: dict[str, float]
    failed: bool


def sample_scores(series: MetricSeries, threshold: float) -> dict[str, float]:
    steps = series.steps
    result = noi(series.dice, threshold, steps)
    return {
        "dice_init": series.dice[0],
        "dice_final": series.dice[-1],
        "dice_nauc": nauc(series.dice, steps),
        "nsd_init": series.nsd[0],
        "nsd_final": series.nsd[-1],
        "nsd_nauc": nauc(series.nsd, steps),
        "nnoi": result.nnoi,
        "nof": 100.0 if result.failed else 0.0,
    }


@dataclass
class EpisodicSummary:
    """Dataset means of run-averaged metrics; NoF is a failure percentage."""

    dice_init: float
    dice_final: float
    dice_nauc: float
    nsd_init: float
    nsd_final: float
    nsd_nauc: float
    nnoi: float
    nof: float
    samples: list[SampleScores] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in SUMMARY_METRICS}


def run_averaged_scores(
    runs: Sequence[Mapping[int, MetricSeries]],
    threshold: float,
) -> list[SampleScores]:
    """Average each scalar metric over inference runs, per sample.

    A sample counts as failed when it fails in a majority of runs.
    """
    if not runs:
        raise ValueError("need at least one inference run")
    sample_ids = sorted(runs[0])
    for run in runs[1:]:
        if sorted(run) != sample_ids:
            raise ValueError("inference runs cover different test samples")
    scores: list[SampleScores] = []
    for sample_id in sample_ids:
        per_run = [sample_scores(run[sample_id], threshold) for run in runs]
        averaged = {name: float(np.mean([r[name] for r in per_run])) for name in SUMMARY_METRICS if name != "nof"}
        failures = sum(1 for r in per_run if r["nof"] > 0)
        failed = 2 * failures > len(runs)
        averaged["nof"] = 100.0 if failed else 0.0
        scores.append(SampleScores(sample_id=sample_id, values=averaged, failed=failed))
    return scores


def episodic_summary(runs: Sequence[Mapping[int, MetricSeries]], threshold: float) -> EpisodicSummary:
    scores = run_averaged_scores(runs, threshold)
    means = {name: float(np.mean([s.values[name] for s in scores])) for name in SUMMARY_METRICS}
    return EpisodicSummary(**means, samples=scores)


# --- trajectories ---


@dataclass
class Trajectory:
    """Expected performance as a step function of received samples t=1..L."""

    metric: str
    values: np.ndarray
    episode_points: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.values)

    def at(self, t: int) -> float:
        return float(self.values[t - 1])


def expected_trajectory(
    base_value: float,
    episodes: Sequence[tuple[int, float]],
    stream_length: int,
    metric: str = "",
) -> Trajectory:
    """Step function: base until the first trigger count T_1, then each
    episode's holdout expectation from T_e + 1 until the next trigger."""
    values = np.full(stream_length, float(base_value), dtype=np.float64)
    points = []
    for trigger, value in sorted(episodes, key=lambda e: e[0]):
        values[trigger:] = value
        points.append(int(trigger))
    return Trajectory(metric=metric, values=values, episode_points=points)


def average_trajectories(trajectories: Sequence[Trajectory]) -> Trajectory:
    """Pointwise mean over training runs."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    lengths = {t.length for t in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"trajectories have different lengths: {sorted(lengths)}")
    stacked = np.stack([t.values for t in trajectories])
    points = sorted({p for t in trajectories for p in t.episode_points})
    return Trajectory(metric=trajectories[0].metric, values=stacked.mean(axis=0), episode_points=points)


def trajectory_auc(trajectory: Trajectory, stream_length: int | None = None) -> float:
    """Mean of the step function over t=1..L."""
    length = stream_length or trajectory.length
    return float(np.mean(trajectory.values[:length]))


def first_crossing(trajectory: Trajectory, threshold: float) -> int | None:
    """Smallest t with value >= threshold (the NoS marker), if any."""
    hits = np.flatnonzero(trajectory.values >= threshold)
    return int(hits[0]) + 1 if len(hits) else None
