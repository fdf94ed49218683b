"""CSV formats of the evaluation outputs.

All numbers pass through :func:`clopasim.util.format_number`, so emitting
what was parsed reproduces the same text.
"""

import csv
import io
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clopasim.evaluation import MetricSeries, Trajectory
from clopasim.interaction import RolloutTrace
from clopasim.schema import SUMMARY_COLUMNS
from clopasim.stats import ALPHA, RankTable
from clopasim.util import atomic_write_text, format_number

METRIC_COLUMNS = ("algorithm", "run_id", "episode_id", "sample_id", "step", "dice", "nsd")
SUMMARY_HEADER = ("task", "algorithm", *SUMMARY_COLUMNS, "first_ranked")
TRAJECTORY_COLUMNS = ("algorithm", "metric", "t", "value")
RANKING_COLUMNS = ("task", "metric", "algo_a", "algo_b", "p_value", "winner")
NOS_COLUMNS = ("task", "algorithm", "metric", "threshold", "nos")


class ReportFormatError(ValueError):
    pass


def _render(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _read(text: str, header: Sequence[str]) -> list[dict[str, str]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != tuple(header):
        raise ReportFormatError(f"expected columns {list(header)}, got {reader.fieldnames}")
    return list(reader)


# --- per-step metrics ---


def format_metrics(algorithm: str, run_id: int, episode_id: int, traces: Sequence[RolloutTrace]) -> str:
    rows = []
    for trace in sorted(traces, key=lambda t: t.sample_id):
        for step in range(len(trace)):
            rows.append([
                algorithm,
                run_id,
                episode_id,
                trace.sample_id,
                step,
                format_number(trace.dice[step]),
                format_number(trace.nsd[step]),
            ])
    return _render(METRIC_COLUMNS, rows)


def write_metrics_csv(path: Path, algorithm: str, run_id: int, episode_id: int, traces: Sequence[RolloutTrace]) -> None:
    atomic_write_text(path, format_metrics(algorithm, run_id, episode_id, traces))


def read_metrics_csv(path: Path) -> dict[int, MetricSeries]:
    series: dict[int, MetricSeries] = {}
    for row in _read(Path(path).read_text(), METRIC_COLUMNS):
        sample_id = int(row["sample_id"])
        entry = series.setdefault(sample_id, MetricSeries(sample_id, [], []))
        if int(row["step"]) != len(entry.dice):
            raise ReportFormatError(f"{path}: steps of sample {sample_id} are not consecutive")
        entry.dice.append(float(row["dice"]))
        entry.nsd.append(float(row["nsd"]))
    return series


# --- summaries (episodic and trajectory AUC share one shape) ---


@dataclass
class SummaryRow:
    task: str
    algorithm: str
    values: dict[str, float]
    first_ranked: tuple[str, ...] = ()


def format_summary(rows: Sequence[SummaryRow]) -> str:
    lines = []
    for row in rows:
        bold = ";".join(m for m in SUMMARY_COLUMNS if m in row.first_ranked)
        lines.append([row.task, row.algorithm, *(format_number(row.values[m]) for m in SUMMARY_COLUMNS), bold])
    return _render(SUMMARY_HEADER, lines)


def parse_summary(text: str) -> list[SummaryRow]:
    rows = []
    for raw in _read(text, SUMMARY_HEADER):
        try:
            values = {m: float(raw[m]) for m in SUMMARY_COLUMNS}
        except ValueError as exc:
            raise ReportFormatError(f"row {raw['task']}/{raw['algorithm']}: {exc}") from exc
        bold = tuple(m for m in raw["first_ranked"].split(";") if m)
        unknown = set(bold) - set(SUMMARY_COLUMNS)
        if unknown:
            raise ReportFormatError(f"unknown metrics in first_ranked: {sorted(unknown)}")
        rows.append(SummaryRow(raw["task"], raw["algorithm"], values, bold))
    return rows


def write_summary_csv(path: Path, rows: Sequence[SummaryRow]) -> None:
    atomic_write_text(path, format_summary(rows))


def read_summary_csv(path: Path) -> list[SummaryRow]:
    return parse_summary(Path(path).read_text())


def apply_rankings(rows: Sequence[SummaryRow], tables: Sequence[RankTable]) -> None:
    """Fill ``first_ranked`` from rank tables of the same task."""
    firsts: dict[tuple[str, str], list[str]] = {}
    for table in tables:
        for algorithm in table.first_ranked:
            firsts.setdefault((table.task, algorithm), []).append(table.metric)
    for row in rows:
        ranked = set(firsts.get((row.task, row.algorithm), ()))
        row.first_ranked = tuple(m for m in SUMMARY_COLUMNS if m in ranked)


# --- trajectories ---


def format_trajectories(trajectories: Mapping[str, Mapping[str, Trajectory]]) -> str:
    rows = []
    for algorithm in sorted(trajectories):
        for metric in SUMMARY_COLUMNS:
            trajectory = trajectories[algorithm].get(metric)
            if trajectory is None:
                continue
            for t, value in enumerate(trajectory.values, start=1):
                rows.append([algorithm, metric, t, format_number(value)])
    return _render(TRAJECTORY_COLUMNS, rows)


def write_trajectories_csv(path: Path, trajectories: Mapping[str, Mapping[str, Trajectory]]) -> None:
    atomic_write_text(path, format_trajectories(trajectories))


def read_trajectories_csv(path: Path) -> dict[str, dict[str, Trajectory]]:
    collected: dict[str, dict[str, list[float]]] = {}
    for row in _read(Path(path).read_text(), TRAJECTORY_COLUMNS):
        values = collected.setdefault(row["algorithm"], {}).setdefault(row["metric"], [])
        if int(row["t"]) != len(values) + 1:
            raise ReportFormatError(f"{path}: t values of {row['algorithm']}/{row['metric']} are not consecutive")
        values.append(float(row["value"]))
    return {
        algorithm: {metric: Trajectory(metric, np.asarray(v)) for metric, v in metrics.items()}
        for algorithm, metrics in collected.items()
    }


# --- rankings and NoS ---


def format_rankings(tables: Sequence[RankTable], alpha: float = ALPHA) -> str:
    rows = []
    for table in tables:
        for c in table.comparisons:
            winner = c.winner if c.winner is not None and c.p_value < alpha else ""
            rows.append([table.task, table.metric, c.algo_a, c.algo_b, format_number(c.p_value), winner])
    return _render(RANKING_COLUMNS, rows)


def write_rankings_csv(path: Path, tables: Sequence[RankTable], alpha: float = ALPHA) -> None:
    atomic_write_text(path, format_rankings(tables, alpha))


@dataclass
class NosRow:
    task: str
    algorithm: str
    metric: str
    threshold: float
    nos: int | None = field(default=None)


def format_nos(rows: Sequence[NosRow]) -> str:
    return _render(
        NOS_COLUMNS,
        [[r.task, r.algorithm, r.metric, format_number(r.threshold), "" if r.nos is None else r.nos] for r in rows],
    )


def write_nos_csv(path: Path, rows: Sequence[NosRow]) -> None:
    atomic_write_text(path, format_nos(rows))
