"""Blocked permutation tests, Clopper-Pearson bounds and p-value corrections.

A *statistic* here is a callable mapping a ``(rows, n)`` boolean label
matrix (True = experimental) to ``rows`` values; the observations are
closed over by the caller. This lets both tests score many relabelings
per numpy call.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import beta

from .model import AgentLog, Group
from .randomizer import (
    DEFAULT_ENUMERATION_CAP,
    count_patterns,
    group_blocks,
    iter_all_label_patterns,
    make_rng,
    sample_chunk,
)

Statistic = Callable[[np.ndarray], np.ndarray]

DEFAULT_SAMPLES = 10**6
DEFAULT_CONFIDENCE = 0.99
DEFAULT_CHUNK = 100_000


class Mode(str, enum.Enum):
    EXACT = "exact"
    SAMPLED = "sampled"


class Direction(str, enum.Enum):
    GREATER_EQUAL = "ge"
    FLIPPED = "flipped"


@dataclass(frozen=True)
class TestResult:
    observed_statistic: float
    exceedances: int
    samples: int
    mode: Mode
    p_point: float
    p_upper: float
    direction: Direction

    __test__ = False  # not a pytest class

    def to_json(self) -> dict:
        return {
            "statistic": float(self.observed_statistic),
            "exceedances": self.exceedances,
            "samples": self.samples,
            "mode": Mode(self.mode).value,
            "p_point": self.p_point,
            "p_upper": self.p_upper,
            "direction": Direction(self.direction).value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TestResult":
        return cls(
            float(d["statistic"]), int(d["exceedances"]), int(d["samples"]), Mode(d["mode"]),
            float(d["p_point"]), float(d["p_upper"]), Direction(d["direction"]),
        )


def units_from_logs(logs: Sequence[AgentLog]) -> tuple[np.ndarray, np.ndarray]:
    """Block id and experimental flag per agent, in log order."""
    blocks = np.array([lg.block_id for lg in logs])
    labels = np.array([lg.group == Group.EXPERIMENTAL for lg in logs], dtype=bool)
    return blocks, labels


def _exceed(values: np.ndarray, observed: float, direction: Direction) -> int:
    if Direction(direction) is Direction.GREATER_EQUAL:
        return int(np.count_nonzero(values >= observed))
    return int(np.count_nonzero(values <= observed))


def observed_value(statistic: Statistic, labels) -> float:
    return float(np.asarray(statistic(np.asarray(labels, dtype=bool)[None, :]))[0])


def exact_permutation_test(
    block_of_unit: Sequence[int],
    labels: Sequence[bool],
    statistic: Statistic,
    direction: Direction = Direction.GREATER_EQUAL,
    cap: int = DEFAULT_ENUMERATION_CAP,
    chunk: int = DEFAULT_CHUNK,
) -> TestResult:
    """p = share of all within-block relabelings at least as extreme as observed."""
    observed = observed_value(statistic, labels)
    total = count_patterns(block_of_unit, labels)
    L = 0
    for batch in iter_all_label_patterns(block_of_unit, labels, chunk=chunk, cap=cap):
        L += _exceed(np.asarray(statistic(batch)), observed, direction)
    p = L / total
    return TestResult(observed, L, total, Mode.EXACT, p, p, Direction(direction))


def sampled_permutation_test(
    block_of_unit: Sequence[int],
    labels: Sequence[bool],
    statistic: Statistic,
    direction: Direction = Direction.GREATER_EQUAL,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    confidence: float = DEFAULT_CONFIDENCE,
    chunk: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> TestResult:
    """Monte Carlo permutation test; ``p_upper`` is the Clopper-Pearson bound.

    The sample is split into chunks of ``chunk`` rows, chunk ``i`` using
    stream ``(seed, i)``, so the result is independent of ``workers``.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    labels = np.asarray(labels, dtype=bool)
    observed = observed_value(statistic, labels)
    blocks = group_blocks(block_of_unit)
    n = len(labels)
    starts = list(range(0, samples, chunk))

    def run(i: int) -> int:
        rows = min(chunk, samples - starts[i])
        batch = sample_chunk(blocks, labels, rows, make_rng(seed, i), n)
        return _exceed(np.asarray(statistic(batch)), observed, direction)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            L = sum(pool.map(run, range(len(starts))))
    else:
        L = sum(run(i) for i in range(len(starts)))
    return TestResult(
        observed, L, samples, Mode.SAMPLED, L / samples,
        clopper_pearson_upper(L, samples, confidence), Direction(direction),
    )


def clopper_pearson_upper(L: int, n: int, confidence: float = DEFAULT_CONFIDENCE) -> float:
    """Upper end of the two-sided Clopper-Pearson interval for L successes in n."""
    if not 0 <= L <= n:
        raise ValueError("need 0 <= L <= n")
    if L == n:
        return 1.0
    return float(beta.ppf(1.0 - (1.0 - confidence) / 2.0, L + 1, n - L))


def _matches(ad, keywords) -> bool:
    hay = f"{ad.title}\n{ad.text}".lower()
    return any(k in hay for k in keywords)


def keyword_counts(logs: Sequence[AgentLog], keywords: Iterable[str]) -> np.ndarray:
    """Per agent, how many of its ads mention any keyword in title or text."""
    keywords = [k.lower() for k in keywords]
    if not keywords:
        raise ValueError("keywords must be nonempty")
    return np.array([sum(_matches(ad, keywords) for ad in lg.ads) for lg in logs], dtype=np.int64)


def keyword_statistic(logs: Sequence[AgentLog], keywords: Iterable[str], target_group: Group) -> int:
    """Number of ads shown to ``target_group`` that mention a keyword."""
    counts = keyword_counts(logs, keywords)
    in_group = np.array([lg.group == target_group for lg in logs], dtype=bool)
    return int(counts[in_group].sum())


def keyword_label_statistic(counts: np.ndarray, target_group: Group) -> Statistic:
    """Vectorized keyword statistic for use in the permutation tests."""
    counts = np.asarray(counts, dtype=np.int64)
    if Group(target_group) is Group.EXPERIMENTAL:
        return lambda lab: lab.astype(np.int64) @ counts
    return lambda lab: (~lab).astype(np.int64) @ counts


def bonferroni(p: float, h: int) -> float:
    """``p * h``, deliberately not clamped to 1."""
    if h < 1:
        raise ValueError("h must be positive")
    return p * h


@dataclass(frozen=True)
class HypothesisFamily:
    entries: tuple[tuple[str, float], ...]
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(n), float(p)) for n, p in self.entries))
        if not self.entries:
            raise ValueError("a hypothesis family needs at least one entry")
        if any(not 0.0 <= p <= 1.0 for _, p in self.entries):
            raise ValueError("p-values must lie in [0, 1]")


@dataclass(frozen=True)
class HolmEntry:
    name: str
    p: float
    adjusted: float | None
    rejected: bool


def holm_bonferroni(family: HypothesisFamily) -> list[HolmEntry]:
    """Holm step-down over the family, most significant first.

    Adjusted values ``p * (m + 1 - k)`` are reported up to and including
    the first non-rejected rank; later ranks get ``None``.
    """
    ordered = sorted(family.entries, key=lambda e: (e[1], e[0]))
    m = len(ordered)
    out = []
    stopped = False
    for k, (name, p) in enumerate(ordered, start=1):
        if stopped:
            out.append(HolmEntry(name, p, None, False))
            continue
        factor = m + 1 - k
        rejected = p <= family.alpha / factor
        out.append(HolmEntry(name, p, p * factor, rejected))
        stopped = not rejected
    return out
