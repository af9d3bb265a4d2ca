"""Block-respecting treatment assignment and label re-randomization.

Labels are booleans, ``True`` meaning the experimental treatment. Every
stochastic function takes an explicit seed; streams are derived with
``numpy.random.SeedSequence`` spawn keys so independent chunks of work
get independent generators.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DEFAULT_ENUMERATION_CAP = 10**7


class EnumerationCapExceeded(RuntimeError):
    """Raised when an exact enumeration would be too large; sample instead."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` on the named sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(stream))))


@dataclass(frozen=True, eq=False)
class Assignment:
    """Per-block label vectors, shape ``(k, m)``."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=bool)
        if labels.ndim != 2:
            raise ValueError("labels must be a (blocks, block_size) array")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def k(self) -> int:
        return self.labels.shape[0]

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    def is_balanced(self) -> bool:
        return bool(np.all(self.labels.sum(axis=1) * 2 == self.m))

    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    def __eq__(self, other):
        return isinstance(other, Assignment) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash(self.labels.tobytes())


def assign(plan, seed: int) -> Assignment:
    """Uniformly random balanced assignment, independently per block.

    ``plan`` only needs ``block_count`` and ``block_size`` attributes.
    """
    block_count, block_size = plan.block_count, plan.block_size
    if block_size % 2:
        raise ValueError("block_size must be even")
    base = np.zeros(block_size, dtype=bool)
    base[: block_size // 2] = True
    rng = make_rng(seed, 0)
    return Assignment(np.stack([rng.permutation(base) for _ in range(block_count)]))


def shuffle_labels(a: Assignment, rng: np.random.Generator) -> Assignment:
    """Re-permute labels uniformly within each block."""
    return Assignment(rng.permuted(a.labels, axis=1))


def count_assignments(k: int, m: int) -> int:
    return math.comb(m, m // 2) ** k


def enumerate_assignments(k: int, m: int, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[Assignment]:
    """Yield every balanced block-respecting label pattern exactly once.

    There are ``C(m, m/2) ** k`` of them. Each pattern stands for
    ``((m/2)!) ** (2k)`` raw within-block permutations, a constant that
    cancels in a permutation-test ratio.
    """
    total = count_assignments(k, m)
    if total > cap:
        raise EnumerationCapExceeded(
            f"{total} assignments exceed the enumeration cap {cap}; use the sampled test"
        )
    patterns = _block_patterns(m, m // 2)
    for combo in itertools.product(range(len(patterns)), repeat=k):
        yield Assignment(patterns[list(combo)])


def _block_patterns(m: int, ones: int) -> np.ndarray:
    out = np.zeros((math.comb(m, ones), m), dtype=bool)
    for row, pos in enumerate(itertools.combinations(range(m), ones)):
        out[row, list(pos)] = True
    return out


def group_blocks(block_of_unit: Sequence[int]) -> list[np.ndarray]:
    """Unit indices for each distinct block id, in block-id order."""
    block_of_unit = np.asarray(block_of_unit)
    return [np.flatnonzero(block_of_unit == b) for b in np.unique(block_of_unit)]


def count_patterns(block_of_unit: Sequence[int], labels: Sequence[bool]) -> int:
    labels = np.asarray(labels, dtype=bool)
    return math.prod(math.comb(len(idx), int(labels[idx].sum())) for idx in group_blocks(block_of_unit))


def iter_all_label_patterns(
    block_of_unit: Sequence[int],
    labels: Sequence[bool],
    chunk: int = 100_000,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> Iterator[np.ndarray]:
    """All relabelings keeping each block's label counts, as ``(rows, n)`` chunks."""
    labels = np.asarray(labels, dtype=bool)
    blocks = group_blocks(block_of_unit)
    total = count_patterns(block_of_unit, labels)
    if total > cap:
        raise EnumerationCapExceeded(
            f"{total} assignments exceed the enumeration cap {cap}; use the sampled test"
        )
    per_block = [_block_patterns(len(idx), int(labels[idx].sum())) for idx in blocks]
    radices = [len(p) for p in per_block]
    n = len(labels)
    for start in range(0, total, chunk):
        lin = np.arange(start, min(start + chunk, total), dtype=np.int64)
        out = np.empty((len(lin), n), dtype=bool)
        for idx, pats, r in zip(reversed(blocks), reversed(per_block), reversed(radices)):
            out[:, idx] = pats[lin % r]
            lin = lin // r
        yield out


def iter_sampled_label_patterns(
    block_of_unit: Sequence[int],
    labels: Sequence[bool],
    samples: int,
    seed: int,
    chunk: int = 100_000,
) -> Iterator[np.ndarray]:
    """``samples`` uniform within-block relabelings, as ``(rows, n)`` chunks.

    Chunk ``i`` draws from stream ``(seed, i)``; the chunk size is part of
    the run configuration and fixes the output for a given seed.
    """
    labels = np.asarray(labels, dtype=bool)
    blocks = group_blocks(block_of_unit)
    n = len(labels)
    for i, start in enumerate(range(0, samples, chunk)):
        rows = min(chunk, samples - start)
        yield sample_chunk(blocks, labels, rows, make_rng(seed, i), n)


def sample_chunk(blocks, labels, rows, rng, n) -> np.ndarray:
    out = np.empty((rows, n), dtype=bool)
    for idx in blocks:
        perm = np.argsort(rng.random((rows, len(idx))), axis=1)
        out[:, idx] = labels[idx][perm]
    return out
