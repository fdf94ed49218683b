"""Finite-difference checks of every differentiable op, in float64."""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from clopasim.autodiff import (
    Tape,
    Tensor,
    backward,
    conv3d,
    instance_norm,
    leaky_relu,
    softmax_channel,
)
from clopasim.model import ModelConfig, ParamGroupMode, ParamStore, build_model, set_trainable
from clopasim.trainer import TrainingItem, ce_loss, interaction_loss, soft_dice_loss
from clopasim.util import derive_rng

logger = logging.getLogger("clopasim.gradcheck")

STEP = 1e-3
TOLERANCE = 1e-3
DENOMINATOR_FLOOR = 1e-8
COORDINATES = 6
# draws per wanted coordinate before giving up on finding smooth ones
MAX_DRAWS = 8
KINK_OPS = ("leaky_relu", "clamp")

Case = tuple[Callable[[], Tensor], list[Tensor]]


@dataclass
class GradcheckResult:
    op: str
    cases: int = 0
    worst_error: float = 0.0
    skipped: int = 0
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class GradcheckReport:
    results: list[GradcheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


@dataclass
class CaseCheck:
    error: float
    checked: int
    skipped: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-coordinate |analytic - numeric| / (|numeric| + 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + DENOMINATOR_FLOOR)))


def _evaluate(f: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    """Value of ``f`` plus the branch taken by every piecewise-linear op."""
    with Tape() as tape:
        value = f().item()
    branches = []
    for node in tape.nodes:
        if node.op not in KINK_OPS:
            continue
        if node.op == "leaky_relu":
            branches.append(node.inputs[0].data >= 0)
        else:
            branches.append(node.output.data == node.inputs[0].data)
    return value, branches


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(f: Callable[[], Tensor], p: Tensor, index: tuple[int, ...], step: float) -> tuple[float, bool]:
    """Central difference quotient and whether both sides took the same branches."""
    original = p.data[index]
    p.data[index] = original + step
    upper, upper_branches = _evaluate(f)
    p.data[index] = original - step
    lower, lower_branches = _evaluate(f)
    p.data[index] = original
    return (upper - lower) / (2 * step), _same_branches(upper_branches, lower_branches)


def check_case(f: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator, coordinates: int = COORDINATES) -> CaseCheck:
    """Compare backward against central differences on sampled coordinates.

    The quotients at STEP and STEP / 2 are Richardson-combined, so the
    truncation error is O(STEP^4) even where a gradient coordinate is
    close to zero.  A coordinate whose perturbation moves any leaky_relu
    or clamp input across its breakpoint has no usable quotient; it is
    skipped and another one drawn.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape():
        backward(f())
    analytic, numeric = [], []
    skipped = 0
    for _ in range(coordinates * MAX_DRAWS):
        if len(numeric) == coordinates:
            break
        p = params[int(rng.integers(len(params)))]
        index = tuple(int(rng.integers(s)) for s in p.shape)
        wide, wide_smooth = _central_difference(f, p, index, STEP)
        narrow, narrow_smooth = _central_difference(f, p, index, STEP / 2)
        if not (wide_smooth and narrow_smooth):
            skipped += 1
            continue
        numeric.append((4 * narrow - wide) / 3)
        analytic.append(0.0 if p.grad is None else float(p.grad[index]))
    if not numeric:
        return CaseCheck(float("inf"), 0, skipped)
    return CaseCheck(relative_error(np.asarray(analytic), np.asarray(numeric)), len(numeric), skipped)


def _tensor(rng: np.random.Generator, shape: Sequence[int], scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), dtype=np.float64)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights, dtype=np.float64)).sum()


def _extents(rng: np.random.Generator, low: int = 3, high: int = 8) -> tuple[int, int, int]:
    return tuple(int(e) for e in rng.integers(low, high + 1, size=3))


def case_conv3d(rng: np.random.Generator) -> Case:
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = k // 2
    x = _tensor(rng, (c_in, *_extents(rng, 4, 8)))
    w = _tensor(rng, (c_out, c_in, k, k, k), 0.5)
    b = _tensor(rng, (c_out,))
    out_shape = conv3d(x, w, b, stride=stride, pad=pad).shape
    weights = rng.normal(size=out_shape)
    return (lambda: _weighted(conv3d(x, w, b, stride=stride, pad=pad), weights)), [x, w, b]


def case_instance_norm(rng: np.random.Generator) -> Case:
    c = int(rng.integers(1, 4))
    x = _tensor(rng, (c, *_extents(rng)))
    scale = _tensor(rng, (c,))
    bias = _tensor(rng, (c,))
    weights = rng.normal(size=x.shape)
    return (lambda: _weighted(instance_norm(x, scale, bias), weights)), [x, scale, bias]


def case_leaky_relu(rng: np.random.Generator) -> Case:
    data = rng.normal(size=(2, *_extents(rng)))
    # keep inputs away from the kink
    data = np.where(np.abs(data) < 0.05, 0.05 * np.sign(data + 1e-12), data)
    x = Tensor(data, dtype=np.float64)
    weights = rng.normal(size=x.shape)
    return (lambda: _weighted(leaky_relu(x), weights)), [x]


def case_softmax(rng: np.random.Generator) -> Case:
    x = _tensor(rng, (int(rng.integers(2, 4)), *_extents(rng)), 2.0)
    weights = rng.normal(size=x.shape)
    return (lambda: _weighted(softmax_channel(x), weights)), [x]


def _probabilities(rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    logits = _tensor(rng, (2, *_extents(rng)), 2.0)
    y = rng.random(logits.shape[1:]) < 0.4
    return logits, y


def case_soft_dice(rng: np.random.Generator) -> Case:
    logits, y = _probabilities(rng)
    return (lambda: soft_dice_loss(softmax_channel(logits), y)), [logits]


def case_ce(rng: np.random.Generator) -> Case:
    logits, y = _probabilities(rng)
    return (lambda: ce_loss(softmax_channel(logits), y)), [logits]


def _float64_store(store: ParamStore) -> ParamStore:
    for _, tensor in store.items():
        tensor.data = tensor.data.astype(np.float64)
    return store


def case_interaction_loss(rng: np.random.Generator) -> Case:
    """Two-stage model on 4^3 patches; clicks and dropouts replayed from a first pass."""
    store = _float64_store(build_model(ModelConfig(num_stages=2, base_channels=2), int(rng.integers(2**31))))
    set_trainable(store, ParamGroupMode.ALL)
    batch = []
    for _ in range(2):
        label = np.zeros((4, 4, 4), dtype=bool)
        lo = rng.integers(0, 3, size=3)
        hi = lo + rng.integers(1, 3, size=3)
        label[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        image = (1.5 * label + rng.normal(size=label.shape)).astype(np.float32)
        batch.append(TrainingItem(image, label, rng))
    n_steps = int(rng.integers(1, 4))
    _, schedule = interaction_loss(store, batch, n_steps)
    params = [store[name] for name in store]
    return (lambda: interaction_loss(store, batch, n_steps, schedule=schedule)[0]), params


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "conv3d": case_conv3d,
    "instance_norm": case_instance_norm,
    "leaky_relu": case_leaky_relu,
    "softmax": case_softmax,
    "soft_dice_loss": case_soft_dice,
    "ce_loss": case_ce,
    "interaction_loss": case_interaction_loss,
}


def run_gradcheck(cases: int = 100, seed: int = 0, ops: Sequence[str] | None = None) -> GradcheckReport:
    results = []
    for op in ops or list(CASES):
        if op not in CASES:
            raise KeyError(f"no gradient check for {op!r}")
        result = GradcheckResult(op)
        for i in range(cases):
            rng = derive_rng(seed, op, i)
            f, params = CASES[op](rng)
            check = check_case(f, params, rng)
            result.cases += 1
            result.skipped += check.skipped
            result.worst_error = max(result.worst_error, check.error)
            if not check.error < TOLERANCE:
                result.failures.append(i)
        logger.info(
            "%s: %d cases, worst relative error %.2e, %d coordinates skipped at breakpoints",
            op, result.cases, result.worst_error, result.skipped,
        )
        results.append(result)
    return GradcheckReport(results)
