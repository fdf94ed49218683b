"""Pairwise significance tests and count-of-better rankings."""

import itertools
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from clopasim.schema import higher_is_better, is_binary

ALPHA = 0.05
WILCOXON_EXACT_MAX_N = 12
MCNEMAR_EXACT_MAX_N = 25


@dataclass
class PairedSample:
    keys: list
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (len(self.keys) == len(self.a) == len(self.b)):
            raise ValueError("paired values must have equal lengths")

    @classmethod
    def align(cls, a: Mapping, b: Mapping) -> "PairedSample":
        if set(a) != set(b):
            raise ValueError("paired samples cover different keys")
        keys = sorted(a)
        return cls(keys, [a[k] for k in keys], [b[k] for k in keys])

    def __len__(self) -> int:
        return len(self.keys)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided p of the signed-rank test with Pratt zero handling.

    Zero differences take part in ranking and are then dropped.  Up to
    twelve nonzero differences the null distribution is enumerated
    exactly; beyond that a normal approximation with continuity
    correction is used.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if len(d) == 0:
        raise ValueError("need at least one pair")
    nonzero = d != 0
    if not nonzero.any():
        return 1.0
    # doubled midranks are integers, so the enumeration compares exactly
    ranks2 = np.rint(2 * sps.rankdata(np.abs(d))).astype(np.int64)[nonzero]
    positive = d[nonzero] > 0
    n = len(ranks2)
    total2 = int(ranks2.sum())
    w2 = int(ranks2[positive].sum())
    deviation = abs(2 * w2 - total2)

    if n <= WILCOXON_EXACT_MAX_N:
        signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
        null = signs @ ranks2
        extreme = np.abs(2 * null - total2) >= deviation
        return float(min(1.0, extreme.mean()))

    mean = total2 / 4.0
    var = float((ranks2.astype(np.float64) ** 2).sum()) / 16.0
    z = max(abs(w2 / 2.0 - mean) - 0.5, 0.0) / np.sqrt(var)
    return float(min(1.0, 2.0 * sps.norm.sf(z)))


def mcnemar(b: int, c: int) -> float:
    """Two-sided McNemar p from the discordant counts."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return 1.0
    if n <= MCNEMAR_EXACT_MAX_N:
        return float(min(1.0, 2.0 * sps.binom.cdf(min(b, c), n, 0.5)))
    statistic = (abs(b - c) - 1.0) ** 2 / n
    return float(sps.chi2.sf(statistic, df=1))


def discordant_counts(fail_a: Sequence[bool], fail_b: Sequence[bool]) -> tuple[int, int]:
    fail_a = np.asarray(fail_a, dtype=bool)
    fail_b = np.asarray(fail_b, dtype=bool)
    return int((fail_a & ~fail_b).sum()), int((~fail_a & fail_b).sum())


def signed_rank_sums(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """(W+, W-) over Pratt ranks: positive and negative differences a - b."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    ranks = sps.rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), float(ranks[d < 0].sum())


@dataclass(frozen=True)
class Comparison:
    algo_a: str
    algo_b: str
    p_value: float
    winner: str | None


def compare(metric: str, algo_a: str, algo_b: str, pairs: PairedSample, binary: bool | None = None) -> Comparison:
    """Test one metric between two algorithms.

    The winner is the side the test statistic leans towards: the larger of
    W+ and W- for the signed-rank test, the smaller discordant failure count
    for McNemar.  Binary outcomes (per-sample failures) go through McNemar;
    trajectories pass ``binary=False`` since their NoF values are already
    percentages.
    """
    if is_binary(metric) if binary is None else binary:
        # failure indicators are stored as 0/100 percentages
        only_a, only_b = discordant_counts(pairs.a > 0, pairs.b > 0)
        p = mcnemar(only_a, only_b)
        winner = algo_a if only_a < only_b else algo_b if only_a > only_b else None
        return Comparison(algo_a, algo_b, p, winner)

    p = wilcoxon_signed_rank(pairs.a, pairs.b)
    w_plus, w_minus = signed_rank_sums(pairs.a, pairs.b)
    lean = w_plus - w_minus
    if not higher_is_better(metric):
        lean = -lean
    winner = algo_a if lean > 0 else algo_b if lean < 0 else None
    return Comparison(algo_a, algo_b, p, winner)


@dataclass
class RankTable:
    task: str
    metric: str
    ranks: dict[str, int]
    comparisons: list[Comparison] = field(default_factory=list)

    @property
    def first_ranked(self) -> list[str]:
        return sorted(name for name, rank in self.ranks.items() if rank == 1)


def rank_algorithms(
    algorithms: Sequence[str],
    comparisons: Sequence[Comparison],
    alpha: float = ALPHA,
) -> dict[str, int]:
    """1 + number of opponents that are significantly better."""
    ranks = {name: 1 for name in algorithms}
    for comparison in comparisons:
        if comparison.winner is None or comparison.p_value >= alpha:
            continue
        loser = comparison.algo_b if comparison.winner == comparison.algo_a else comparison.algo_a
        ranks[loser] += 1
    return ranks


def rank_table(
    task: str,
    metric: str,
    values: Mapping[str, Mapping],
    alpha: float = ALPHA,
    binary: bool | None = None,
) -> RankTable:
    """All pairwise comparisons of one metric; ``values[algo][key]``."""
    algorithms = sorted(values)
    comparisons = [
        compare(metric, a, b, PairedSample.align(values[a], values[b]), binary)
        for a, b in itertools.combinations(algorithms, 2)
    ]
    return RankTable(task, metric, rank_algorithms(algorithms, comparisons, alpha), comparisons)
