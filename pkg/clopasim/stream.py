"""The annotation campaign: a growing cache of finished samples, episode
triggering, permanent train/validation assignment and full memory replay.
"""

import enum
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from clopasim.config import ConfigError
from clopasim.model import ParamGroupMode, ParamStore
from clopasim.trainer import EpisodeResult, TrainConfig, run_episode, write_loss_csv, write_validation_csv
from clopasim.util import atomic_write_text, derive_rng, derive_seed
from clopasim.volume import LabelledSample

logger = logging.getLogger("clopasim.stream")

MANIFEST_NAME = "manifest.yaml"
SPLIT_RETRIES = 32
# keeps ceil() of exact products such as 0.25 * 20 from rounding up
_CEIL_SLACK = 1e-9


def _ceil(value: float) -> int:
    return math.ceil(value - _CEIL_SLACK)


@dataclass(frozen=True)
class SchedulerConfig:
    dataset_size: int
    k_d: float = 0.25
    k_m: float = 0.2

    def validate(self) -> None:
        if self.dataset_size < 0:
            raise ConfigError("scheduler.dataset_size", f"must be >= 0, got {self.dataset_size}")
        for name in ("k_d", "k_m"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"scheduler.{name}", f"must lie in (0, 1], got {value}")

    @property
    def min_cache(self) -> int:
        return _ceil(self.k_d * self.dataset_size)

    @property
    def min_unassigned(self) -> int:
        return _ceil(1.0 / self.k_m)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None, dataset_size: int) -> "SchedulerConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - {"k_d", "k_m"})
        if unknown:
            raise ConfigError(f"scheduler.{unknown[0]}", "unknown scheduler option")
        try:
            cfg = cls(dataset_size=dataset_size, **{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError("scheduler", str(exc)) from exc
        cfg.validate()
        return cfg


class Assignment(enum.Enum):
    UNASSIGNED = "unassigned"
    TRAIN = "train"
    VAL = "val"


@dataclass
class CachedSample:
    sample_id: int
    assignment: Assignment = Assignment.UNASSIGNED


class AnnotationCache:
    """Finished samples in arrival order; assignments never change once made."""

    def __init__(self, dataset_size: int):
        self.dataset_size = dataset_size
        self.entries: list[CachedSample] = []

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, sample_id: int) -> None:
        if len(self.entries) >= self.dataset_size:
            raise ValueError(f"cache already holds all {self.dataset_size} samples")
        self.entries.append(CachedSample(sample_id))

    def _ids(self, assignment: Assignment) -> list[int]:
        return [e.sample_id for e in self.entries if e.assignment is assignment]

    def unassigned(self) -> list[CachedSample]:
        return [e for e in self.entries if e.assignment is Assignment.UNASSIGNED]

    @property
    def unassigned_count(self) -> int:
        return len(self.unassigned())

    def train_ids(self) -> list[int]:
        return self._ids(Assignment.TRAIN)

    def val_ids(self) -> list[int]:
        return self._ids(Assignment.VAL)


def should_trigger(cache_size: int, dataset_size: int, unassigned_count: int, cfg: SchedulerConfig) -> bool:
    if cache_size > dataset_size:
        raise ValueError(f"cache size {cache_size} exceeds dataset size {dataset_size}")
    return cache_size >= _ceil(cfg.k_d * dataset_size) and unassigned_count >= cfg.min_unassigned


def trigger_schedule(cfg: SchedulerConfig) -> list[int]:
    """Cache sizes at which episodes trigger; independent of sample content."""
    points = []
    unassigned = 0
    for size in range(1, cfg.dataset_size + 1):
        unassigned += 1
        if should_trigger(size, cfg.dataset_size, unassigned, cfg):
            points.append(size)
            unassigned = 0
    return points


def assign_split(cache: AnnotationCache, rng: np.random.Generator, k_m: float) -> None:
    """Bernoulli(k_m) validation labels for the unassigned samples.

    Redraws a bounded number of times until both sides are nonempty, then
    forces one sample across.  A lone sample always goes to training.
    """
    pending = cache.unassigned()
    if not pending:
        return
    if len(pending) == 1:
        pending[0].assignment = Assignment.TRAIN
        return
    to_val = rng.random(len(pending)) < k_m
    for _ in range(SPLIT_RETRIES):
        if 0 < to_val.sum() < len(to_val):
            break
        to_val = rng.random(len(pending)) < k_m
    else:
        flip = int(rng.integers(len(pending)))
        to_val[flip] = not to_val.all()
    for entry, val in zip(pending, to_val):
        entry.assignment = Assignment.VAL if val else Assignment.TRAIN


@dataclass
class EpisodeRecord:
    episode_id: int
    cache_size_at_trigger: int
    checkpoint: str | None
    train_ids: list[int]
    val_ids: list[int]
    validation: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int | None = None
    updates: int = 0
    no_validation: bool = False

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["validation"] = [[int(e), float(v)] for e, v in self.validation]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpisodeRecord":
        values = dict(data)
        values["validation"] = [(int(e), float(v)) for e, v in values.get("validation", [])]
        return cls(**values)


@dataclass
class CampaignManifest:
    task: str
    algorithm: str
    mode: str
    run_id: int
    order_seed: int
    stream_order: list[int]
    trainer: dict[str, Any]
    scheduler: dict[str, Any]
    base_fingerprint: str
    episodes: list[EpisodeRecord] = field(default_factory=list)
    complete: bool = False

    def to_yaml(self) -> str:
        data = asdict(self)
        data["episodes"] = [e.to_dict() for e in self.episodes]
        return yaml.safe_dump(data, sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "CampaignManifest":
        data = yaml.safe_load(text) or {}
        data["episodes"] = [EpisodeRecord.from_dict(e) for e in data.get("episodes") or []]
        return cls(**data)

    def save(self, run_dir: Path) -> None:
        atomic_write_text(Path(run_dir) / MANIFEST_NAME, self.to_yaml())

    @classmethod
    def load(cls, run_dir: Path) -> "CampaignManifest":
        return cls.from_yaml((Path(run_dir) / MANIFEST_NAME).read_text())


@dataclass
class CampaignResult:
    episodes: list[EpisodeRecord]
    final_store: ParamStore
    checkpoints: dict[int, ParamStore] = field(default_factory=dict)


def stream_order(sample_ids: Sequence[int], order_seed: int) -> list[int]:
    return [int(i) for i in derive_rng(order_seed, "order").permutation(sorted(sample_ids))]


def episode_checkpoint_name(episode_id: int) -> str:
    return f"episode_{episode_id:03d}.clpa"


def run_campaign(
    train_samples: Sequence[LabelledSample],
    order_seed: int,
    trainer_cfg: TrainConfig,
    scheduler_cfg: SchedulerConfig,
    mode: ParamGroupMode,
    base: ParamStore,
    run_dir: Path | None = None,
    task: str = "",
    algorithm: str = "",
    run_id: int = 0,
    on_episode: Callable[[EpisodeRecord, ParamStore], None] | None = None,
) -> CampaignResult:
    """Stream the permuted training split through the cache and train an
    episode, continuing from the previous checkpoint, at every trigger.

    With ``run_dir`` each finished episode is checkpointed and recorded
    in the manifest, and episodes already recorded there are loaded
    instead of retrained.
    """
    if len(train_samples) != scheduler_cfg.dataset_size:
        raise ValueError(
            f"scheduler expects {scheduler_cfg.dataset_size} samples, stream has {len(train_samples)}"
        )
    by_id = {s.sample_id: s for s in train_samples}
    order = stream_order(list(by_id), order_seed)
    manifest = CampaignManifest(
        task=task,
        algorithm=algorithm,
        mode=mode.value,
        run_id=run_id,
        order_seed=order_seed,
        stream_order=order,
        trainer=asdict(trainer_cfg),
        scheduler=asdict(scheduler_cfg),
        base_fingerprint=base.fingerprint(),
    )
    done: dict[int, EpisodeRecord] = {}
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if (run_dir / MANIFEST_NAME).exists():
            previous = CampaignManifest.load(run_dir)
            if previous.base_fingerprint == manifest.base_fingerprint and previous.stream_order == order:
                done = {e.episode_id: e for e in previous.episodes}
            else:
                logger.warning("manifest in %s belongs to a different campaign, starting over", run_dir)

    result = CampaignResult(episodes=[], final_store=base.copy())
    if mode is ParamGroupMode.FROZEN:
        manifest.complete = True
        if run_dir is not None:
            manifest.save(run_dir)
        return result

    cache = AnnotationCache(scheduler_cfg.dataset_size)
    current = base.copy()
    episode_id = 0
    for sample_id in order:
        cache.add(sample_id)
        if not should_trigger(len(cache), scheduler_cfg.dataset_size, cache.unassigned_count, scheduler_cfg):
            continue
        episode_id += 1
        assign_split(cache, derive_rng(order_seed, "split", episode_id), scheduler_cfg.k_m)
        train_ids, val_ids = cache.train_ids(), cache.val_ids()

        previous = done.get(episode_id)
        checkpoint = run_dir / episode_checkpoint_name(episode_id) if run_dir is not None else None
        if previous is not None and checkpoint is not None and checkpoint.exists():
            logger.info("%s run %d: episode %d already done, loading %s", algorithm, run_id, episode_id, checkpoint)
            current = ParamStore.load(checkpoint)
            record = previous
        else:
            logger.info(
                "%s run %d: episode %d at cache size %d (%d train, %d val)",
                algorithm, run_id, episode_id, len(cache), len(train_ids), len(val_ids),
            )
            episode: EpisodeResult = run_episode(
                current,
                [by_id[i] for i in train_ids],
                [by_id[i] for i in val_ids],
                trainer_cfg,
                mode,
                derive_seed(order_seed, "episode", episode_id),
                algorithm=algorithm,
                run_id=run_id,
            )
            current = episode.store
            record = EpisodeRecord(
                episode_id=episode_id,
                cache_size_at_trigger=len(cache),
                checkpoint=checkpoint.name if checkpoint is not None else None,
                train_ids=train_ids,
                val_ids=val_ids,
                validation=episode.validation,
                best_epoch=episode.best_epoch,
                updates=episode.updates,
                no_validation=episode.no_validation,
            )
            if run_dir is not None:
                write_loss_csv(run_dir / f"episode_{episode_id:03d}_loss.csv", episode_id, episode.losses)
                current.save(checkpoint)
        result.episodes.append(record)
        result.checkpoints[episode_id] = current
        if on_episode is not None:
            on_episode(record, current)
        if run_dir is not None:
            manifest.episodes = list(result.episodes)
            manifest.save(run_dir)

    result.final_store = current
    manifest.episodes = list(result.episodes)
    manifest.complete = True
    if run_dir is not None:
        write_validation_csv(
            run_dir / "validation.csv",
            [(r.episode_id, epoch, score) for r in result.episodes for epoch, score in r.validation],
        )
        manifest.save(run_dir)
    return result
