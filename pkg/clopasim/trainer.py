"""One training episode: patch sampling, the multi-step interactive loss
and Adam updates over the unfrozen parameter groups."""

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from clopasim.autodiff import Tape, Tensor, backward
from clopasim.config import ConfigError
from clopasim.evaluation import dice
from clopasim.interaction import (
    Click,
    binarise,
    editing_clicks,
    initial_clicks,
    model_input,
    normalise_image,
    rollout,
)
from clopasim.ledger import ledger, record_updates
from clopasim.model import ParamGroupMode, ParamStore, forward, set_trainable
from clopasim.util import derive_rng, derive_seed, format_number
from clopasim.volume import LabelledSample

logger = logging.getLogger("clopasim.trainer")

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    updates_per_epoch: int = 50
    batch_size: int = 2
    interaction_steps: int = 5
    patch_extent: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment_flips: bool = False

    def validate(self, divisor: int = 1) -> None:
        for name in ("lr", "epochs", "updates_per_epoch", "batch_size", "interaction_steps", "patch_extent", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"trainer.{name}", f"must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"trainer.{name}", f"must lie in [0, 1), got {getattr(self, name)}")
        if self.patch_extent % divisor:
            raise ConfigError("trainer.patch_extent", f"{self.patch_extent} is not divisible by {divisor}")

    @property
    def total_updates(self) -> int:
        return self.epochs * self.updates_per_epoch

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> "TrainConfig":
        data = dict(data or {})
        known = {f.name: f for f in fields(cls)}
        if "betas" in data:
            data["beta1"], data["beta2"] = data.pop("betas")
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"trainer.{unknown[0]}", "unknown trainer option")
        kwargs = {}
        for name, value in data.items():
            target = known[name].type
            try:
                kwargs[name] = bool(value) if target in (bool, "bool") else type(known[name].default)(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"trainer.{name}", str(exc)) from exc
        return cls(**kwargs)


# --- losses ---


def soft_dice_loss(m: Tensor, y: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - soft Dice of the foreground channel."""
    fg = m[1]
    target = Tensor(y, dtype=m.data.dtype)
    overlap = (fg * target).sum()
    return 1.0 - (2.0 * overlap + smooth) / (fg.sum() + float(np.sum(y)) + smooth)


def ce_loss(m: Tensor, y: np.ndarray) -> Tensor:
    """Voxel-mean negative log-likelihood of the true class."""
    logp = m.clamp(PROB_FLOOR, 1.0).log()
    target = Tensor(y, dtype=m.data.dtype)
    return -(logp[1] * target + logp[0] * (1.0 - target)).mean()


@dataclass
class TrainingItem:
    image: np.ndarray  # already normalised
    label: np.ndarray
    rng: np.random.Generator


@dataclass
class LossBreakdown:
    """Per-step loss parts and the click schedule that produced them.

    ``clicks[i][b]`` is the full prompt set of sample b at step i and
    ``active[i][b]`` whether that sample still counted at step i; passing
    a breakdown back into :func:`interaction_loss` replays both.
    """

    total: float
    dice: list[float]
    ce: list[float]
    active_counts: list[int]
    clicks: list[list[tuple[Click, ...]]] = field(default_factory=list, repr=False)
    active: list[list[bool]] = field(default_factory=list, repr=False)

    @property
    def steps(self) -> int:
        return len(self.dice)

    @property
    def dice_part(self) -> float:
        return sum(self.dice) / self.steps

    @property
    def ce_part(self) -> float:
        return sum(self.ce) / self.steps

    def recombined(self) -> float:
        return sum(d + c for d, c in zip(self.dice, self.ce)) / self.steps


StepTerms = list[tuple[Tensor, Tensor] | None]


def combine_step_losses(step_terms: Sequence[StepTerms], n_steps: int) -> tuple[Tensor | None, list[float], list[float], list[int]]:
    """(1/N) * sum over steps of the active-sample mean of Dice + CE.

    ``None`` marks a sample that no longer counts; a step without any
    active sample contributes zero.
    """
    total: Tensor | None = None
    dice_means, ce_means, counts = [], [], []
    for terms in step_terms:
        active = [t for t in terms if t is not None]
        counts.append(len(active))
        if not active:
            dice_means.append(0.0)
            ce_means.append(0.0)
            continue
        step_loss = None
        for d, c in active:
            step_loss = d + c if step_loss is None else step_loss + d + c
        step_loss = step_loss / float(len(active) * n_steps)
        total = step_loss if total is None else total + step_loss
        dice_means.append(sum(d.item() for d, _ in active) / len(active))
        ce_means.append(sum(c.item() for _, c in active) / len(active))
    return total, dice_means, ce_means, counts


def interaction_loss(
    store: ParamStore,
    batch: Sequence[TrainingItem],
    n_steps: int,
    schedule: LossBreakdown | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Simulated N-step interaction over a batch of patches.

    Samples whose argmax prediction reaches Dice 1 drop out of every
    later step.  Clicks are sampled from detached predictions.
    """
    if not batch:
        raise ValueError("batch must not be empty")
    if n_steps <= 0:
        raise ValueError(f"n_steps must be positive, got {n_steps}")
    dtype = store["head.weight"].data.dtype
    clicks: list[list[Click]] = [[] for _ in batch]
    predictions: list[np.ndarray | None] = [None] * len(batch)
    alive = [True] * len(batch)
    step_terms: list[StepTerms] = []
    click_log: list[list[tuple[Click, ...]]] = []
    active_log: list[list[bool]] = []

    for step in range(n_steps):
        terms: StepTerms = []
        for b, item in enumerate(batch):
            if schedule is not None:
                alive[b] = schedule.active[step][b]
                clicks[b] = list(schedule.clicks[step][b])
            elif alive[b]:
                if step == 0:
                    clicks[b].extend(initial_clicks(item.label, item.rng))
                else:
                    clicks[b].extend(editing_clicks(predictions[b], item.label, step, item.rng))
            if not alive[b]:
                terms.append(None)
                continue
            m = forward(store, model_input(item.image, clicks[b], dtype=dtype, normalised=True))
            terms.append((soft_dice_loss(m, item.label), ce_loss(m, item.label)))
            predictions[b] = binarise(m.data)
            if schedule is None and dice(predictions[b], item.label) == 1.0:
                alive[b] = False
        step_terms.append(terms)
        click_log.append([tuple(c) for c in clicks])
        active_log.append([t is not None for t in terms])

    total, dice_means, ce_means, counts = combine_step_losses(step_terms, n_steps)
    breakdown = LossBreakdown(
        total=total.item(),
        dice=dice_means,
        ce=ce_means,
        active_counts=counts,
        clicks=click_log,
        active=active_log,
    )
    return total, breakdown


# --- optimiser ---


class Adam:
    """Adam with bias correction over the trainable entries of a store."""

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.lr
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParamStore) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in store.trainable_names():
            tensor = store[name]
            g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data, dtype=np.float64)
                self.v[name] = np.zeros_like(tensor.data, dtype=np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            tensor.data = (tensor.data - update).astype(tensor.data.dtype)
        store.zero_grad()


# --- patches ---


@dataclass
class Patch:
    image: np.ndarray
    label: np.ndarray
    centre: tuple[int, int, int]
    foreground_centred: bool


def sample_patch(image: np.ndarray, label: np.ndarray, extent: int, rng: np.random.Generator) -> Patch:
    """Class-uniform patch: centre on foreground or background with equal odds.

    Volumes smaller than ``extent`` are zero-padded at the far end.
    """
    pad = [(0, max(0, extent - s)) for s in image.shape]
    if any(p[1] for p in pad):
        image = np.pad(image, pad)
        label = np.pad(label, pad)
    label = np.asarray(label, dtype=bool)
    want_foreground = bool(rng.random() < 0.5)
    pool = label if want_foreground else ~label
    if not pool.any():
        want_foreground = not want_foreground
        pool = ~pool
    candidates = np.flatnonzero(pool)
    centre = np.array(np.unravel_index(candidates[rng.integers(len(candidates))], label.shape))
    start = np.clip(centre - extent // 2, 0, np.array(label.shape) - extent)
    window = tuple(slice(int(s), int(s) + extent) for s in start)
    return Patch(
        image=np.ascontiguousarray(image[window], dtype=np.float32),
        label=np.ascontiguousarray(label[window]),
        centre=tuple(int(c) for c in centre),
        foreground_centred=want_foreground,
    )


def flip_axes(patch: Patch, rng: np.random.Generator) -> Patch:
    axes = tuple(axis for axis in range(3) if rng.random() < 0.5)
    if not axes:
        return patch
    return Patch(
        image=np.ascontiguousarray(np.flip(patch.image, axes)),
        label=np.ascontiguousarray(np.flip(patch.label, axes)),
        centre=patch.centre,
        foreground_centred=patch.foreground_centred,
    )


# --- episode ---


@dataclass
class LossRow:
    update_idx: int
    total_loss: float
    dice_part: float
    ce_part: float


@dataclass
class EpisodeResult:
    store: ParamStore
    losses: list[LossRow] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int | None = None
    updates: int = 0
    no_validation: bool = False


def validation_dice(store: ParamStore, val_set: Sequence[LabelledSample], steps: int, seed: int) -> float:
    scores = []
    for sample in sorted(val_set, key=lambda s: s.sample_id):
        trace = rollout(store, sample.image, sample.label, steps, seed, sample.sample_id, spacing=sample.spacing)
        scores.append(trace.dice[-1])
    return float(np.mean(scores))


def run_episode(
    store: ParamStore,
    train_set: Sequence[LabelledSample],
    val_set: Sequence[LabelledSample],
    cfg: TrainConfig,
    mode: ParamGroupMode,
    seed: int,
    algorithm: str = "",
    run_id: int = 0,
) -> EpisodeResult:
    """Fixed-budget fine-tuning; keeps the epoch with the best validation Dice.

    Ties go to the later epoch.  Without validation samples the final
    epoch is kept and ``no_validation`` is set.
    """
    if not train_set:
        raise ValueError("train_set must not be empty")
    work = store.copy()
    set_trainable(work, mode)
    if mode is ParamGroupMode.FROZEN or not work.trainable_names():
        return EpisodeResult(store=work, no_validation=not val_set)

    cfg.validate(work.cfg.divisor)
    ledger.check_updates(cfg.total_updates)
    rng = derive_rng(seed, "patches")
    images = {s.sample_id: normalise_image(s.image) for s in train_set}
    ordered = sorted(train_set, key=lambda s: s.sample_id)
    optimizer = Adam(cfg)
    result = EpisodeResult(store=work, no_validation=not val_set)
    best_score = -np.inf
    val_seed = derive_seed(seed, "validation")

    for epoch in range(cfg.epochs):
        for u in range(cfg.updates_per_epoch):
            update_idx = epoch * cfg.updates_per_epoch + u
            batch = []
            for b in range(cfg.batch_size):
                sample = ordered[int(rng.integers(len(ordered)))]
                patch = sample_patch(images[sample.sample_id], sample.label, cfg.patch_extent, rng)
                if cfg.augment_flips:
                    patch = flip_axes(patch, rng)
                batch.append(TrainingItem(patch.image, patch.label, derive_rng(seed, "clicks", update_idx, b)))
            with Tape():
                loss, breakdown = interaction_loss(work, batch, cfg.interaction_steps)
                backward(loss)
            optimizer.step(work)
            result.losses.append(LossRow(update_idx, breakdown.total, breakdown.dice_part, breakdown.ce_part))
        result.updates += cfg.updates_per_epoch

        if val_set:
            score = validation_dice(work, val_set, cfg.interaction_steps - 1, val_seed)
            result.validation.append((epoch, score))
            logger.info("epoch %d: loss %.4f, validation dice %.4f", epoch, result.losses[-1].total_loss, score)
            if score >= best_score:
                best_score = score
                result.best_epoch = epoch
                result.store = work.copy()
        else:
            logger.info("epoch %d: loss %.4f", epoch, result.losses[-1].total_loss)

    if not val_set:
        logger.warning("empty validation set, keeping the final epoch")
        result.best_epoch = cfg.epochs - 1
        result.store = work
    record_updates(algorithm, run_id, result.updates, mode=mode.value)
    return result


LOSS_COLUMNS = ("episode_id", "update_idx", "total_loss", "dice_part", "ce_part")
VALIDATION_COLUMNS = ("episode_id", "epoch", "val_dice")


def write_loss_csv(path: Path, episode_id: int, rows: Sequence[LossRow]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for row in rows:
            writer.writerow([
                episode_id,
                row.update_idx,
                format_number(row.total_loss),
                format_number(row.dice_part),
                format_number(row.ce_part),
            ])


def write_validation_csv(path: Path, rows: Sequence[tuple[int, int, float]]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(VALIDATION_COLUMNS)
        for episode_id, epoch, score in rows:
            writer.writerow([episode_id, epoch, format_number(score)])
