"""L2-regularized logistic regression with block-respecting cross-validation.

The objective minimized is

    mean_i [log(1 + exp(z_i)) - y_i z_i] + ||w||^2 / (2C),   z = Xw + b

with the bias unpenalized. It is solved by Newton's method with conjugate
gradient inner solves and an Armijo backtracking line search, so the
objective never increases between iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureVector, Vocabulary, to_matrix
from .model import Group

DEFAULT_C_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
MAX_ITER = 1000
REL_TOL = 1e-8


class SingleClassError(ValueError):
    pass


class TooFewExamplesError(ValueError):
    pass


class TooFewBlocksError(ValueError):
    pass


def as_bool_labels(labels) -> np.ndarray:
    # Group is a str enum, so the string comparison covers both forms.
    return np.array(
        [lab == Group.EXPERIMENTAL if isinstance(lab, str) else bool(lab) for lab in labels],
        dtype=bool,
    )


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, C: float) -> float:
    z = X @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + w @ w / (2.0 * C))


def gradient(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, C: float) -> tuple[np.ndarray, float]:
    r = _sigmoid(X @ w + b) - y
    n = len(y)
    return X.T @ r / n + w / C, float(r.mean())


def _newton_direction(X, s, g, C, tol, max_cg):
    # CG on H d = -g, with H = [X 1]^T diag(s(1-s)) [X 1] / n + diag(1/C, ..., 0).
    n = X.shape[0]
    d_w = X.shape[1]
    curv = s * (1.0 - s) / n

    def hv(v):
        u = curv * (X @ v[:d_w] + v[d_w])
        out = np.empty_like(v)
        out[:d_w] = X.T @ u + v[:d_w] / C
        out[d_w] = u.sum() + 1e-12 * v[d_w]
        return out

    x = np.zeros_like(g)
    r = -g.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(max_cg):
        if math.sqrt(rr) <= tol:
            break
        hp = hv(p)
        php = p @ hp
        if php <= 0:
            break
        alpha = rr / php
        x += alpha * p
        r -= alpha * hp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not np.any(x):
        x = -g
    return x


def fit_logistic(X: np.ndarray, y: np.ndarray, C: float, max_iter: int = MAX_ITER):
    """Return ``(weights, bias, objective_trace)``."""
    if C <= 0:
        raise ValueError("C must be positive")
    y = np.asarray(y, dtype=float)
    if y.min() == y.max():
        raise SingleClassError("training labels contain a single class")
    n, d = X.shape
    w = np.zeros(d)
    p = y.mean()
    b = math.log(p / (1 - p))
    f = objective(X, y, w, b, C)
    trace = [f]
    for _ in range(max_iter):
        gw, gb = gradient(X, y, w, b, C)
        g = np.append(gw, gb)
        gnorm = float(np.linalg.norm(g))
        if gnorm < 1e-12:
            break
        s = _sigmoid(X @ w + b)
        step = _newton_direction(X, s, g, C, min(0.5, math.sqrt(gnorm)) * gnorm, max_cg=d + 1)
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -gnorm**2
        t = 1.0
        for _ in range(60):
            w_new, b_new = w + t * step[:d], b + t * step[d]
            f_new = objective(X, y, w_new, b_new, C)
            if f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        decrease = f - f_new
        w, b, f = w_new, b_new, f_new
        trace.append(f)
        if decrease <= REL_TOL * max(abs(trace[-2]), 1e-300):
            break
    return w, float(b), tuple(trace)


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float
    C: float
    vocab: Vocabulary | None = field(default=None, compare=False)
    trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if self.vocab is not None and len(w) != len(self.vocab):
            raise ValueError("weights length must equal vocabulary size")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def scores(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.bias

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """Boolean predictions (True = experimental); a zero score is control."""
        return self.scores(X) > 0


def train(vectors: Sequence[FeatureVector], labels, C: float, vocab: Vocabulary) -> LinearModel:
    X = to_matrix(vectors, len(vocab))
    w, b, trace = fit_logistic(X, as_bool_labels(labels), C)
    return LinearModel(w, b, C, vocab, trace)


def score(model: LinearModel, v: FeatureVector) -> float:
    return sum(model.weights[i] * c for i, c in v.counts.items()) + model.bias


def predict(model: LinearModel, v: FeatureVector) -> Group:
    return Group.EXPERIMENTAL if score(model, v) > 0 else Group.CONTROL


def block_folds(block_of_example: Sequence[int], n_folds: int = 10) -> list[np.ndarray]:
    """Split examples into contiguous block ranges; a block is never split."""
    block_of_example = np.asarray(block_of_example)
    blocks = np.unique(block_of_example)
    n_folds = min(n_folds, len(blocks))
    if n_folds < 2:
        raise TooFewBlocksError("cross-validation needs at least two training blocks")
    return [np.flatnonzero(np.isin(block_of_example, chunk)) for chunk in np.array_split(blocks, n_folds)]


def cross_validate(
    X: np.ndarray, y: np.ndarray, grid: Sequence[float], block_of_example: Sequence[int], n_folds: int = 10
) -> dict[float, float]:
    """Mean validation accuracy over block-contiguous folds, per C."""
    folds = block_folds(block_of_example, n_folds)
    n = len(y)
    table = {}
    for C in grid:
        accs = []
        for held in folds:
            train_mask = np.ones(n, dtype=bool)
            train_mask[held] = False
            ytr = y[train_mask]
            if ytr.min() == ytr.max():
                pred = np.full(len(held), bool(ytr[0]))
            else:
                w, b, _ = fit_logistic(X[train_mask], ytr, C)
                pred = X[held] @ w + b > 0
            accs.append(float(np.mean(pred == y[held])))
        table[C] = float(np.mean(accs))
    return table


def choose_from_table(table: dict[float, float]) -> float:
    best = max(table.values())
    return min(C for C, acc in table.items() if acc >= best - 1e-12)


def select_regularization(
    train_vectors: Sequence[FeatureVector],
    train_labels,
    grid: Sequence[float] = DEFAULT_C_GRID,
    block_of_example: Sequence[int] | None = None,
    vocab: Vocabulary | None = None,
) -> float:
    """Grid value with the best mean 10-fold accuracy; ties go to smaller C."""
    y = as_bool_labels(train_labels)
    if min(int(y.sum()), int((~y).sum())) < 10:
        raise TooFewExamplesError("need at least 10 training examples per class")
    if len(grid) == 1:
        return grid[0]
    size = len(vocab) if vocab is not None else 1 + max((i for v in train_vectors for i in v.counts), default=-1)
    X = to_matrix(train_vectors, size)
    if block_of_example is None:
        block_of_example = np.arange(len(y))
    return choose_from_table(cross_validate(X, y, grid, block_of_example))


def accuracy_statistic(model: LinearModel, test_vectors: Sequence[FeatureVector], test_labels) -> int:
    """Number of test agents classified correctly."""
    y = as_bool_labels(test_labels)
    X = to_matrix(test_vectors, len(model.weights))
    return int(np.sum(model.predict_matrix(X) == y))


@dataclass(frozen=True)
class TrainTestSplit:
    train_blocks: tuple[int, ...]
    test_blocks: tuple[int, ...]


def train_test_split(block_ids: Sequence[int]) -> TrainTestSplit:
    """The last ceil(k/10) blocks by id are held out for testing."""
    blocks = sorted(set(block_ids))
    n_test = max(1, math.ceil(len(blocks) / 10))
    if len(blocks) - n_test < 1:
        raise TooFewBlocksError(f"{len(blocks)} block(s) is too few to split into train and test")
    return TrainTestSplit(tuple(blocks[:-n_test]), tuple(blocks[-n_test:]))


@dataclass(frozen=True)
class FeatureExplanation:
    key: str
    coefficient: float
    agents_control: int = 0
    agents_experimental: int = 0
    total_control: int = 0
    total_experimental: int = 0

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "coefficient": self.coefficient,
            "agents": {"control": self.agents_control, "experimental": self.agents_experimental},
            "appearances": {"control": self.total_control, "experimental": self.total_experimental},
        }


@dataclass(frozen=True)
class Explanation:
    experimental: tuple[FeatureExplanation, ...]
    control: tuple[FeatureExplanation, ...]


def explain(model: LinearModel, top: int, vectors=None, labels=None) -> Explanation:
    """Most positive (experimental) and most negative (control) coefficients.

    When ``vectors`` (feature vectors or a dense count matrix) and
    ``labels`` cover the full dataset, each entry also carries per-group
    agent counts and total appearances.
    """
    if top < 1:
        raise ValueError("top must be positive")
    w = model.weights
    d = len(w)
    if vectors is not None:
        X = vectors if isinstance(vectors, np.ndarray) else to_matrix(vectors, d)
        y = as_bool_labels(labels)
        agents_e, agents_c = (X[y] > 0).sum(axis=0), (X[~y] > 0).sum(axis=0)
        tot_e, tot_c = X[y].sum(axis=0), X[~y].sum(axis=0)
    else:
        agents_e = agents_c = tot_e = tot_c = np.zeros(d)

    def entry(i):
        key = model.vocab.format_key(i) if model.vocab is not None else f"f{i}"
        return FeatureExplanation(key, float(w[i]), int(agents_c[i]), int(agents_e[i]), int(tot_c[i]), int(tot_e[i]))

    order = np.argsort(-w, kind="stable")
    positive = tuple(entry(i) for i in order[:top])
    negative = tuple(entry(i) for i in np.argsort(w, kind="stable")[:top])
    return Explanation(experimental=positive, control=negative)


def dump_model(model: LinearModel) -> str:
    """Text dump: C, bias, then (coefficient, feature) lines, descending."""
    lines = [f"# C\t{model.C!r}", f"# bias\t{model.bias!r}"]
    for i in np.argsort(-model.weights, kind="stable"):
        key = model.vocab.format_key(i) if model.vocab is not None else f"f{i}"
        lines.append(f"{float(model.weights[i])!r}\t{key}")
    return "\n".join(lines) + "\n"
