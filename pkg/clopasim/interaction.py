"""Simulated clicking user: prompt sampling, prompt channels and rollouts.

One interaction step adds at most one foreground and one background
click, each drawn uniformly from that class's current false-negative
region, then re-predicts from (image, all clicks so far).
"""

import csv
import enum
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clopasim.autodiff import Tensor
from clopasim.evaluation import dice, nsd
from clopasim.model import ParamStore, forward
from clopasim.util import derive_rng, format_number

CLICK_RADIUS = 1


class DegenerateSampleError(ValueError):
    pass


class ClickClass(enum.IntEnum):
    FOREGROUND = 0
    BACKGROUND = 1


@dataclass(frozen=True)
class Click:
    position: tuple[int, int, int]
    cls: ClickClass
    step: int


def click_rng(seed: int, sample_id: int, step: int) -> np.random.Generator:
    return derive_rng(seed, sample_id, step)


def false_negative_region(pred: np.ndarray, gt: np.ndarray, cls: ClickClass) -> np.ndarray:
    """Foreground: gt ∧ ¬pred.  Background: pred ∧ ¬gt."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in extent")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if cls == ClickClass.FOREGROUND:
        return gt & ~pred
    return pred & ~gt


def sample_click(region: np.ndarray, cls: ClickClass, step: int, rng: np.random.Generator) -> Click | None:
    candidates = np.flatnonzero(region)
    if len(candidates) == 0:
        return None
    flat = candidates[rng.integers(len(candidates))]
    position = tuple(int(i) for i in np.unravel_index(flat, region.shape))
    return Click(position=position, cls=cls, step=step)


def _ball_offsets(radius: int) -> np.ndarray:
    r = int(np.ceil(radius))
    grid = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1].reshape(3, -1).T
    return grid[(grid ** 2).sum(axis=1) <= radius ** 2]


_BALL = _ball_offsets(CLICK_RADIUS)


def encode_prompts(clicks: Iterable[Click], extents: Sequence[int]) -> np.ndarray:
    """Channel 0 foreground balls, channel 1 background balls, clipped at borders."""
    channels = np.zeros((2, *extents), dtype=np.float32)
    bounds = np.asarray(extents)
    for click in clicks:
        voxels = _BALL + np.asarray(click.position)
        inside = np.all((voxels >= 0) & (voxels < bounds), axis=1)
        voxels = voxels[inside]
        channels[int(click.cls), voxels[:, 0], voxels[:, 1], voxels[:, 2]] = 1.0
    return channels


def normalise_image(image: np.ndarray) -> np.ndarray:
    """Per-volume z-score, the usual CT/MR intensity preprocessing."""
    image = np.asarray(image, dtype=np.float32)
    std = float(image.std())
    return ((image - image.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def model_input(image: np.ndarray, clicks: Iterable[Click], dtype=np.float32, normalised: bool = False) -> Tensor:
    """[3,D,H,W]: normalised image plus the two prompt channels."""
    prompts = encode_prompts(clicks, image.shape)
    channel = np.asarray(image, dtype=np.float32) if normalised else normalise_image(image)
    return Tensor(np.concatenate([channel[None], prompts], axis=0), dtype=dtype)


def predict_probs(store: ParamStore, image: np.ndarray, clicks: Iterable[Click]) -> np.ndarray:
    """Class probabilities for the whole volume.

    Extents that the encoder cannot halve evenly are zero-padded at the
    far end and cropped back afterwards.
    """
    divisor = store.cfg.divisor
    extents = image.shape
    x = model_input(image, clicks, dtype=store["head.weight"].data.dtype).data
    pad = [(0, 0)] + [(0, -e % divisor) for e in extents]
    if any(p[1] for p in pad):
        x = np.pad(x, pad)
    probs = forward(store, Tensor(x, dtype=x.dtype)).data
    return probs[:, : extents[0], : extents[1], : extents[2]]


def binarise(probs: np.ndarray) -> np.ndarray:
    """Foreground where it strictly beats background; ties go to background."""
    return probs[1] > probs[0]


@dataclass
class InteractionState:
    clicks: list[Click] = field(default_factory=list)
    prediction: np.ndarray | None = None
    terminated: bool = False

    def count(self, cls: ClickClass) -> int:
        return sum(1 for c in self.clicks if c.cls == cls)

    def update(self, prediction: np.ndarray, gt: np.ndarray) -> None:
        self.prediction = prediction
        self.terminated = dice(prediction, gt) == 1.0


def initial_clicks(gt: np.ndarray, rng: np.random.Generator) -> list[Click]:
    """Initialisation pair: foreground from gt, background from the true background."""
    clicks = []
    fg = sample_click(gt, ClickClass.FOREGROUND, 0, rng)
    if fg is not None:
        clicks.append(fg)
    bg = sample_click(~gt, ClickClass.BACKGROUND, 0, rng)
    if bg is not None:
        clicks.append(bg)
    return clicks


def editing_clicks(prediction: np.ndarray, gt: np.ndarray, step: int, rng: np.random.Generator) -> list[Click]:
    clicks = []
    for cls in (ClickClass.FOREGROUND, ClickClass.BACKGROUND):
        click = sample_click(false_negative_region(prediction, gt, cls), cls, step, rng)
        if click is not None:
            clicks.append(click)
    return clicks


class RecordMode(enum.Enum):
    METRICS = "metrics"
    PREDICTIONS = "predictions"


@dataclass
class RolloutTrace:
    sample_id: int
    dice: list[float] = field(default_factory=list)
    nsd: list[float] = field(default_factory=list)
    clicks_fg: list[int] = field(default_factory=list)
    clicks_bg: list[int] = field(default_factory=list)
    predictions: list[np.ndarray] | None = None
    clicks: list[Click] = field(default_factory=list)
    executed_steps: int = 0
    terminated: bool = False

    def __len__(self) -> int:
        return len(self.dice)


def rollout(
    store: ParamStore,
    image: np.ndarray,
    gt: np.ndarray,
    steps: int,
    seed: int,
    sample_id: int = 0,
    record_mode: RecordMode = RecordMode.METRICS,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    tolerance: float = 1.0,
) -> RolloutTrace:
    """Interactive initialisation followed by ``steps`` editing steps.

    After termination (Dice 1) no further clicks are added and the
    terminal values are carried forward, so the trace always has
    ``steps + 1`` entries.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    gt = np.asarray(gt, dtype=bool)
    if not gt.any():
        raise DegenerateSampleError(f"sample {sample_id} has an empty foreground")

    trace = RolloutTrace(sample_id=sample_id)
    if record_mode == RecordMode.PREDICTIONS:
        trace.predictions = []
    state = InteractionState()

    def _predict(step: int) -> None:
        probs = predict_probs(store, image, state.clicks)
        state.update(binarise(probs), gt)
        _record(step)

    def _record(step: int) -> None:
        trace.dice.append(dice(state.prediction, gt))
        trace.nsd.append(nsd(state.prediction, gt, tolerance, spacing))
        trace.clicks_fg.append(state.count(ClickClass.FOREGROUND))
        trace.clicks_bg.append(state.count(ClickClass.BACKGROUND))
        if trace.predictions is not None:
            trace.predictions.append(state.prediction.copy())

    state.clicks.extend(initial_clicks(gt, click_rng(seed, sample_id, 0)))
    _predict(0)
    for step in range(1, steps + 1):
        if state.terminated:
            _record(step)
            continue
        state.clicks.extend(editing_clicks(state.prediction, gt, step, click_rng(seed, sample_id, step)))
        _predict(step)
        trace.executed_steps = step

    trace.clicks = list(state.clicks)
    trace.terminated = state.terminated
    return trace


TRACE_COLUMNS = ("sample_id", "step", "dice", "nsd", "n_clicks_fg", "n_clicks_bg")


def write_trace_csv(path: Path, traces: Sequence[RolloutTrace]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for trace in sorted(traces, key=lambda t: t.sample_id):
            for step in range(len(trace)):
                writer.writerow([
                    trace.sample_id,
                    step,
                    format_number(trace.dice[step]),
                    format_number(trace.nsd[step]),
                    trace.clicks_fg[step],
                    trace.clicks_bg[step],
                ])
