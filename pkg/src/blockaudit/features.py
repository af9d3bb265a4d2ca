"""Sparse count features over the ads an agent saw.

Three feature sets are supported: displayed URL, (URL, title) pair, and
word stems drawn from the title and body text. The vocabulary is fixed
from training logs; features unseen there are dropped at vectorize time.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Hashable, Iterable, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from .model import AdRecord, AgentLog


class FeatureSetKind(str, enum.Enum):
    URL = "url"
    URL_TITLE = "urltitle"
    WORD_STEM = "wordstem"


_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")
_PORTER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop numbers and 1-char tokens."""
    return [
        tok for tok in _TOKEN_SPLIT.split(text.lower())
        if len(tok) >= 2 and not tok.isdigit()
    ]


@lru_cache(maxsize=65536)
def stem(word: str) -> str:
    # Porter is not idempotent on its own (agreed -> agre -> agr), so run it
    # to a fixed point.
    for _ in range(16):
        nxt = _PORTER.stem(word, to_lowercase=False)
        if nxt == word:
            break
        word = nxt
    return word


def ad_keys(kind: FeatureSetKind, ad: AdRecord) -> list[Hashable]:
    kind = FeatureSetKind(kind)
    if kind is FeatureSetKind.URL:
        return [ad.url]
    if kind is FeatureSetKind.URL_TITLE:
        return [(ad.url, ad.title)]
    return [stem(tok) for tok in tokenize(ad.title) + tokenize(ad.text)]


@dataclass(frozen=True)
class Vocabulary:
    kind: FeatureSetKind
    entries: tuple
    index: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.index:
            object.__setattr__(self, "index", {key: i for i, key in enumerate(self.entries)})
        if len(self.index) != len(self.entries):
            raise ValueError("vocabulary keys must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def format_key(self, i: int) -> str:
        key = self.entries[i]
        if isinstance(key, tuple):
            url, title = key
            return f"{title} | {url}"
        return key

    def digest(self) -> str:
        payload = json.dumps([self.kind.value, [list(k) if isinstance(k, tuple) else k for k in self.entries]],
                             ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def build_vocabulary(kind: FeatureSetKind, training_logs: Sequence[AgentLog]) -> Vocabulary:
    """Every feature key in the training ads, in first-occurrence order."""
    if not training_logs:
        raise ValueError("training_logs must be nonempty")
    kind = FeatureSetKind(kind)
    seen: dict = {}
    for log in training_logs:
        for ad in log.ads:
            for key in ad_keys(kind, ad):
                seen.setdefault(key, len(seen))
    return Vocabulary(kind, tuple(seen), seen)


@dataclass(frozen=True)
class FeatureVector:
    counts: dict

    def total(self) -> int:
        return sum(self.counts.values())


def vectorize(vocab: Vocabulary, log: AgentLog) -> FeatureVector:
    counts: dict[int, int] = {}
    for ad in log.ads:
        for key in ad_keys(vocab.kind, ad):
            i = vocab.index.get(key)
            if i is not None:
                counts[i] = counts.get(i, 0) + 1
    return FeatureVector(dict(sorted(counts.items())))


def to_matrix(vectors: Iterable[FeatureVector], size: int) -> np.ndarray:
    vectors = list(vectors)
    X = np.zeros((len(vectors), size))
    for row, v in enumerate(vectors):
        for i, c in v.counts.items():
            X[row, i] = c
    return X
