"""Command handlers shared by the CLI and tests; no argparse types here."""

import asyncio
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from clopasim.evaluation import (
    MetricSeries,
    Trajectory,
    average_trajectories,
    episodic_summary,
    expected_trajectory,
    first_crossing,
    run_averaged_scores,
    trajectory_auc,
)
from clopasim.experiment import AlgorithmSpec, ExperimentConfig
from clopasim.gradcheck import run_gradcheck
from clopasim.interaction import rollout, write_trace_csv
from clopasim.ledger import ledger, record_forward_passes
from clopasim.model import ParamGroupMode, ParamStore, build_model
from clopasim.report import (
    NosRow,
    SummaryRow,
    apply_rankings,
    read_metrics_csv,
    write_metrics_csv,
    write_nos_csv,
    write_rankings_csv,
    write_summary_csv,
    write_trajectories_csv,
)
from clopasim.schema import SUMMARY_COLUMNS
from clopasim.stats import RankTable, rank_table
from clopasim.stream import MANIFEST_NAME, CampaignManifest, run_campaign
from clopasim.svg import render_trajectory_svg
from clopasim.synthdata import (
    TASK_FILE,
    TaskDataset,
    TaskSpec,
    generate_task,
    read_task,
    write_preview,
    write_task,
)
from clopasim.trainer import run_episode
from clopasim.util import atomic_write_text, derive_seed, slugify

logger = logging.getLogger("clopasim.commands")

BASE_CHECKPOINT = "base.clpa"
BASE_EVAL_DIR = "base_eval"
CALIBRATION_DIR = "calibration"
# Dice-valued metrics share the expert threshold line
THRESHOLD_METRICS = ("dice_init", "dice_final", "dice_nauc")
# NoS counts samples until the final-step Dice trajectory reaches the threshold
NOS_METRIC = "dice_final"


class MissingArtifactsError(Exception):
    def __init__(self, path: Path, message: str):
        self.path = Path(path)
        self.message = message
        super().__init__(f"{message}: {path}")


# --- paths ---


def task_dir(cfg: ExperimentConfig, spec: TaskSpec) -> Path:
    return cfg.data_dir / slugify(spec.name)


def run_dir(cfg: ExperimentConfig, algorithm: str, run_id: int) -> Path:
    return cfg.runs_dir / slugify(algorithm, fallback="algorithm") / f"run_{run_id}"


def eval_path(directory: Path, episode_id: int, inference_run: int) -> Path:
    return directory / "eval" / f"episode_{episode_id:03d}_inf_{inference_run}.csv"


def base_eval_path(cfg: ExperimentConfig, inference_run: int) -> Path:
    return eval_path(cfg.runs_dir / BASE_EVAL_DIR, 0, inference_run)


def inference_runs_for(cfg: ExperimentConfig, training_run: int) -> list[int]:
    """Inference run i evaluates the checkpoints of training run i mod T."""
    return [i for i in range(cfg.inference_runs) if i % cfg.training_runs == training_run]


def _load_dataset(cfg: ExperimentConfig) -> TaskDataset:
    spec = TaskSpec.load(cfg.task_spec)
    directory = task_dir(cfg, spec)
    if not (directory / TASK_FILE).exists():
        raise MissingArtifactsError(directory, "no generated dataset, run 'generate' first")
    return read_task(directory)


# --- generate ---


async def cmd_generate(cfg: ExperimentConfig, preview: bool = False) -> dict[str, Any]:
    spec = TaskSpec.load(cfg.task_spec)
    dataset = await asyncio.to_thread(generate_task, spec, cfg.master_seed)
    directory = task_dir(cfg, spec)
    write_task(dataset, directory)
    if preview:
        for sample in dataset.samples:
            write_preview(sample, directory / "previews" / f"{sample.sample_id:04d}.png")
    return {
        "task": spec.name,
        "path": str(directory),
        "samples": len(dataset.samples),
        "train": len(dataset.train_ids),
        "holdout": len(dataset.holdout_ids),
    }


# --- base model ---


def _pretrain(cfg: ExperimentConfig) -> ParamStore:
    base = cfg.base
    store = build_model(cfg.model, derive_seed(base.seed, "init"))
    if base.pretrain_task is None:
        return store
    spec = TaskSpec.load(base.pretrain_task)
    source = generate_task(spec, base.seed)
    trainer = replace(cfg.trainer, epochs=base.pretrain_epochs, updates_per_epoch=base.pretrain_updates)
    logger.info("pretraining on %s: %d updates", spec.name, trainer.total_updates)
    result = run_episode(store, source.train, [], trainer, ParamGroupMode.ALL, derive_seed(base.seed, "pretrain"), algorithm="base")
    return result.store


def load_base(cfg: ExperimentConfig) -> ParamStore:
    """The shared starting checkpoint, created once under the runs directory."""
    path = cfg.runs_dir / BASE_CHECKPOINT
    if path.exists():
        return ParamStore.load(path)
    if cfg.base.checkpoint is not None:
        if not cfg.base.checkpoint.exists():
            raise MissingArtifactsError(cfg.base.checkpoint, "base checkpoint not found")
        store = ParamStore.load(cfg.base.checkpoint)
    else:
        store = _pretrain(cfg)
    store.save(path)
    return store


async def cmd_pretrain(cfg: ExperimentConfig) -> dict[str, Any]:
    store = await asyncio.to_thread(load_base, cfg)
    return {
        "path": str(cfg.runs_dir / BASE_CHECKPOINT),
        "parameters": store.parameter_count(),
        "fingerprint": store.fingerprint(),
    }


# --- calibrate ---


def calibration_checkpoint(cfg: ExperimentConfig, spec: TaskSpec) -> Path:
    return cfg.runs_dir / CALIBRATION_DIR / f"{slugify(spec.name)}.clpa"


def holdout_mean_dice(store: ParamStore, dataset: TaskDataset, seed: int) -> float:
    """Mean initialisation Dice (no corrective clicks) over the holdout split."""
    scores = [
        rollout(store, s.image, s.label, 0, seed, s.sample_id, spacing=s.spacing).dice[0]
        for s in dataset.holdout
    ]
    return float(np.mean(scores))


def _calibrate(cfg: ExperimentConfig) -> tuple[ParamStore, ParamStore, TaskDataset, float]:
    dataset = _load_dataset(cfg)
    base = load_base(cfg)
    result = run_episode(
        base, dataset.train, [], cfg.trainer, ParamGroupMode.ALL,
        derive_seed(cfg.master_seed, "calibrate"), algorithm="calibrate",
    )
    measured = holdout_mean_dice(result.store, dataset, derive_seed(cfg.master_seed, "calibrate-eval"))
    return base, result.store, dataset, measured


async def cmd_calibrate(cfg: ExperimentConfig) -> dict[str, Any]:
    """Expert threshold = holdout mean initialisation Dice after full-data training.

    The trained checkpoint is kept and the threshold is written together
    with what produced it, so it can be recomputed from the saved files.
    """
    base, trained, dataset, measured = await asyncio.to_thread(_calibrate, cfg)
    spec = TaskSpec.load(cfg.task_spec)
    checkpoint = calibration_checkpoint(cfg, spec)
    trained.save(checkpoint)
    provenance = {
        "master_seed": cfg.master_seed,
        "base_fingerprint": base.fingerprint(),
        "checkpoint": str(checkpoint),
        "checkpoint_fingerprint": trained.fingerprint(),
        "trainer": asdict(cfg.trainer),
        "train_samples": len(dataset.train_ids),
        "holdout_samples": len(dataset.holdout_ids),
        "holdout_mean_dice": measured,
    }
    updated = replace(spec, expert_threshold=max(round(measured, 3), 0.001), calibration=provenance)
    updated.save(cfg.task_spec)
    directory = task_dir(cfg, spec)
    meta = yaml.safe_load((directory / TASK_FILE).read_text())
    meta["spec"] = updated.to_mapping()
    atomic_write_text(directory / TASK_FILE, yaml.safe_dump(meta, sort_keys=False))
    logger.info("%s: holdout mean dice %.4f, expert threshold %.3f", spec.name, measured, updated.expert_threshold)
    return {"task": spec.name, "expert_threshold": updated.expert_threshold, "checkpoint": str(checkpoint)}


# --- run ---


def evaluate_checkpoint(
    cfg: ExperimentConfig,
    store: ParamStore,
    dataset: TaskDataset,
    path: Path,
    algorithm: str,
    run_id: int,
    episode_id: int,
    inference_run: int,
) -> None:
    """Holdout rollouts of one checkpoint; skipped when the CSV already exists."""
    if path.exists():
        return
    seed = derive_seed(cfg.master_seed, "inference", inference_run)
    traces = [
        rollout(store, s.image, s.label, cfg.eval_steps, seed, s.sample_id, spacing=s.spacing, tolerance=dataset.spec.nsd_tolerance)
        for s in dataset.holdout
    ]
    record_forward_passes(algorithm, run_id, sum(t.executed_steps + 1 for t in traces), episode=episode_id)
    if cfg.dump_traces:
        trace_path = path.with_name(path.stem + "_trace.csv")
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        write_trace_csv(trace_path, traces)
    write_metrics_csv(path, algorithm, run_id, episode_id, traces)


def _campaign_job(cfg: ExperimentConfig, dataset: TaskDataset, base: ParamStore, algorithm: AlgorithmSpec, run_id: int) -> dict[str, Any]:
    directory = run_dir(cfg, algorithm.name, run_id)
    result = run_campaign(
        dataset.train,
        derive_seed(cfg.master_seed, "order", run_id),
        cfg.trainer,
        cfg.scheduler_config(len(dataset.train_ids)),
        algorithm.mode,
        base,
        run_dir=directory,
        task=dataset.spec.name,
        algorithm=algorithm.name,
        run_id=run_id,
    )
    for record in result.episodes:
        for i in inference_runs_for(cfg, run_id):
            evaluate_checkpoint(
                cfg, result.checkpoints[record.episode_id], dataset,
                eval_path(directory, record.episode_id, i), algorithm.name, run_id, record.episode_id, i,
            )
    return {"algorithm": algorithm.name, "run": run_id, "episodes": len(result.episodes)}


async def cmd_run(cfg: ExperimentConfig) -> dict[str, Any]:
    """Base evaluation plus every campaign; ``compute_budget`` caps the
    gradient updates spent here, base pretraining excluded."""
    dataset = _load_dataset(cfg)
    base = await asyncio.to_thread(load_base, cfg)
    if cfg.compute_budget is not None:
        ledger.limit_updates = ledger.totals_by_category().get("gradient_update", 0) + cfg.compute_budget
    semaphore = asyncio.Semaphore(cfg.threads)

    async def _limited(fn, *args):
        async with semaphore:
            return await asyncio.to_thread(fn, *args)

    await asyncio.gather(*(
        _limited(evaluate_checkpoint, cfg, base, dataset, base_eval_path(cfg, i), "base", 0, 0, i)
        for i in range(cfg.inference_runs)
    ))
    jobs = await asyncio.gather(*(
        _limited(_campaign_job, cfg, dataset, base, algorithm, r)
        for algorithm in cfg.algorithms
        for r in range(cfg.training_runs)
    ))
    totals = ledger.totals_by_category()
    updates = ledger.totals_by_algorithm("gradient_update")
    logger.info(
        "compute: %d gradient updates, %d forward passes",
        totals.get("gradient_update", 0), totals.get("forward_pass", 0),
    )
    for name, count in sorted(updates.items()):
        logger.info("  %s: %d gradient updates", name, count)
    return {"campaigns": jobs, "compute": totals, "updates": updates}


# --- report / rank ---


@dataclass
class AlgorithmArtifacts:
    """Evaluation series of one algorithm, per training run and episode."""

    name: str
    # run_id -> list of (trigger sample count, {inference_run: series}); episode 0 first
    runs: dict[int, list[tuple[int, dict[int, dict[int, MetricSeries]]]]] = field(default_factory=dict)

    def final_series(self) -> list[dict[int, MetricSeries]]:
        """Final-checkpoint series, one per inference run."""
        series = []
        for run_id in sorted(self.runs):
            series.extend(self.runs[run_id][-1][1][i] for i in sorted(self.runs[run_id][-1][1]))
        return series


@dataclass
class Collected:
    task: str
    threshold: float
    stream_length: int
    algorithms: list[AlgorithmArtifacts]


def _read_series(paths: dict[int, Path]) -> dict[int, dict[int, MetricSeries]] | None:
    if not all(p.exists() for p in paths.values()):
        return None
    return {i: read_metrics_csv(p) for i, p in paths.items()}


def collect(cfg: ExperimentConfig) -> Collected:
    dataset = _load_dataset(cfg)
    base_series = _read_series({i: base_eval_path(cfg, i) for i in range(cfg.inference_runs)})
    if base_series is None:
        raise MissingArtifactsError(cfg.runs_dir / BASE_EVAL_DIR, "no base-model evaluation, run 'run' first")
    if dataset.spec.expert_threshold is None:
        raise MissingArtifactsError(task_dir(cfg, dataset.spec) / TASK_FILE, "no expert threshold, run 'calibrate' first")
    collected = Collected(dataset.spec.name, dataset.spec.expert_threshold, len(dataset.train_ids), [])
    for algorithm in cfg.algorithms:
        artifacts = AlgorithmArtifacts(algorithm.name)
        for run_id in range(cfg.training_runs):
            directory = run_dir(cfg, algorithm.name, run_id)
            inference = inference_runs_for(cfg, run_id)
            if not (directory / MANIFEST_NAME).exists():
                logger.warning("%s run %d: no manifest, skipped", algorithm.name, run_id)
                continue
            manifest = CampaignManifest.load(directory)
            if not manifest.complete:
                logger.warning("%s run %d: campaign incomplete, reporting finished episodes only", algorithm.name, run_id)
            points = [(0, {i: base_series[i] for i in inference})]
            for record in manifest.episodes:
                series = _read_series({i: eval_path(directory, record.episode_id, i) for i in inference})
                if series is None:
                    logger.warning("%s run %d: episode %d not evaluated, stopping there", algorithm.name, run_id, record.episode_id)
                    break
                points.append((record.cache_size_at_trigger, series))
            if inference:
                artifacts.runs[run_id] = points
        if artifacts.runs:
            collected.algorithms.append(artifacts)
        else:
            logger.warning("%s: no usable runs, left out of the report", algorithm.name)
    if not collected.algorithms:
        raise MissingArtifactsError(cfg.runs_dir, "no campaign artifacts to report on")
    return collected


def _sample_values(artifacts: AlgorithmArtifacts, threshold: float) -> dict[str, dict[int, float]]:
    scores = run_averaged_scores(artifacts.final_series(), threshold)
    return {m: {s.sample_id: s.values[m] for s in scores} for m in SUMMARY_COLUMNS}


def algorithm_trajectories(artifacts: AlgorithmArtifacts, threshold: float, stream_length: int) -> dict[str, Trajectory]:
    per_metric: dict[str, list[Trajectory]] = {m: [] for m in SUMMARY_COLUMNS}
    for run_id in sorted(artifacts.runs):
        points = artifacts.runs[run_id]
        summaries = [(trigger, episodic_summary([s[i] for i in sorted(s)], threshold).as_dict()) for trigger, s in points]
        base_values = summaries[0][1]
        for metric in SUMMARY_COLUMNS:
            episodes = [(trigger, values[metric]) for trigger, values in summaries[1:]]
            per_metric[metric].append(expected_trajectory(base_values[metric], episodes, stream_length, metric))
    return {m: average_trajectories(t) for m, t in per_metric.items()}


def rank_tables(collected: Collected) -> tuple[list[RankTable], list[RankTable]]:
    episodic_values = {a.name: _sample_values(a, collected.threshold) for a in collected.algorithms}
    trajectories = {
        a.name: algorithm_trajectories(a, collected.threshold, collected.stream_length) for a in collected.algorithms
    }
    episodic, trajectory = [], []
    for metric in SUMMARY_COLUMNS:
        episodic.append(rank_table(collected.task, metric, {n: v[metric] for n, v in episodic_values.items()}))
        # paired along the data-sample index t
        trajectory.append(rank_table(
            collected.task,
            metric,
            {n: dict(enumerate(t[metric].values.tolist(), start=1)) for n, t in trajectories.items()},
            binary=False,
        ))
    return episodic, trajectory


def _write_rankings(cfg: ExperimentConfig, collected: Collected) -> tuple[list[RankTable], list[RankTable]]:
    episodic, trajectory = rank_tables(collected)
    write_rankings_csv(cfg.report_dir / "rankings_episodic.csv", episodic)
    write_rankings_csv(cfg.report_dir / "rankings_trajectory.csv", trajectory)
    return episodic, trajectory


def _summaries(collected: Collected) -> tuple[list[SummaryRow], list[SummaryRow], dict[str, dict[str, Trajectory]]]:
    episodic_rows, trajectory_rows = [], []
    trajectories = {}
    for artifacts in collected.algorithms:
        summary = episodic_summary(artifacts.final_series(), collected.threshold)
        episodic_rows.append(SummaryRow(collected.task, artifacts.name, summary.as_dict()))
        trajectories[artifacts.name] = algorithm_trajectories(artifacts, collected.threshold, collected.stream_length)
        aucs = {m: trajectory_auc(t, collected.stream_length) for m, t in trajectories[artifacts.name].items()}
        trajectory_rows.append(SummaryRow(collected.task, artifacts.name, aucs))
    return episodic_rows, trajectory_rows, trajectories


async def cmd_report(cfg: ExperimentConfig) -> dict[str, Any]:
    collected = await asyncio.to_thread(collect, cfg)
    out = cfg.report_dir
    episodic_rows, trajectory_rows, trajectories = _summaries(collected)
    episodic_tables, trajectory_tables = _write_rankings(cfg, collected)
    apply_rankings(episodic_rows, episodic_tables)
    apply_rankings(trajectory_rows, trajectory_tables)
    write_summary_csv(out / "summary_episodic.csv", episodic_rows)
    write_summary_csv(out / "summary_trajectory.csv", trajectory_rows)
    write_trajectories_csv(out / "trajectories.csv", trajectories)

    nos_rows = [
        NosRow(collected.task, name, NOS_METRIC, collected.threshold, first_crossing(t[NOS_METRIC], collected.threshold))
        for name, t in trajectories.items()
    ]
    write_nos_csv(out / "nos.csv", nos_rows)
    nos = {r.algorithm: r.nos for r in nos_rows}
    for metric in SUMMARY_COLUMNS:
        svg = render_trajectory_svg(
            {name: t[metric] for name, t in trajectories.items()},
            metric,
            threshold=collected.threshold if metric in THRESHOLD_METRICS else None,
            nos=nos if metric == NOS_METRIC else None,
            size=cfg.plot_size,
            title=f"{collected.task}: {metric}",
        )
        atomic_write_text(out / f"trajectory_{metric}.svg", svg)
    return {
        "report": str(out),
        "algorithms": [a.name for a in collected.algorithms],
        "nos": {r.algorithm: r.nos for r in nos_rows},
    }


async def cmd_rank(cfg: ExperimentConfig) -> dict[str, Any]:
    collected = await asyncio.to_thread(collect, cfg)
    episodic, trajectory = _write_rankings(cfg, collected)
    return {
        "episodic": {t.metric: t.ranks for t in episodic},
        "trajectory": {t.metric: t.ranks for t in trajectory},
    }


# --- gradcheck ---


async def cmd_gradcheck(cases: int = 100, seed: int = 0, ops: Sequence[str] | None = None) -> dict[str, Any]:
    report = await asyncio.to_thread(run_gradcheck, cases, seed, ops)
    return {
        "passed": report.passed,
        "ops": {
            r.op: {"cases": r.cases, "worst_error": r.worst_error, "failures": len(r.failures), "skipped": r.skipped}
            for r in report.results
        },
    }
