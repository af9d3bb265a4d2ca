"""Experiment orchestration and analysis.

``run_experiment`` drives a SUT block by block and writes JSONL logs.
``analyze`` turns a log directory into a ``RunManifest``: either a
held-out classifier accuracy or a keyword count, tested with the blocked
permutation test. ``summarize_family`` applies Holm-Bonferroni across
manifests exploring one property.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classifier as clf
from .features import FeatureSetKind, build_vocabulary, to_matrix, vectorize
from .model import (
    AgentLog,
    ExperimentPlan,
    Group,
    dumps_log,
    format_plan,
    load_logs,
    parse_plan,
    validate_plan,
    write_logs,
)
from .randomizer import DEFAULT_ENUMERATION_CAP, assign, count_patterns
from .simulator import Sut, SutProtocolError
from .stats import (
    DEFAULT_CHUNK,
    Direction,
    HypothesisFamily,
    TestResult,
    bonferroni,
    exact_permutation_test,
    holm_bonferroni,
    keyword_counts,
    keyword_label_statistic,
    sampled_permutation_test,
)

log = logging.getLogger(__name__)

LOG_FILE = "logs.jsonl"
PLAN_FILE = "plan.cfg"
INCOMPLETE_FILE = "INCOMPLETE"


class PlanValidationError(ValueError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class PropertyKind(str, enum.Enum):
    NONDISCRIMINATION = "nondiscrimination"
    TRANSPARENCY = "transparency"
    EFFECTFUL_CHOICE = "effectful-choice"
    AD_CHOICE = "ad-choice"


class StatisticMode(str, enum.Enum):
    CLASSIFIER_ACCURACY = "classifier-accuracy"
    KEYWORD_COUNT = "keyword-count"


@dataclass(frozen=True)
class PropertyPreset:
    kind: PropertyKind
    statistic_mode: StatisticMode
    directions: tuple[Direction, ...]
    bonferroni_h: int = 1

    def __post_init__(self):
        if self.kind is PropertyKind.AD_CHOICE:
            ok = (self.statistic_mode is StatisticMode.KEYWORD_COUNT and len(self.directions) == 2
                  and self.bonferroni_h == 2)
        else:
            ok = self.statistic_mode is StatisticMode.CLASSIFIER_ACCURACY and len(self.directions) == 1
        if not ok:
            raise ValueError(f"inconsistent preset for {self.kind.value}")


_ONE_SIDED = (Direction.GREATER_EQUAL,)
PRESETS = {
    PropertyKind.NONDISCRIMINATION: PropertyPreset(
        PropertyKind.NONDISCRIMINATION, StatisticMode.CLASSIFIER_ACCURACY, _ONE_SIDED),
    PropertyKind.TRANSPARENCY: PropertyPreset(
        PropertyKind.TRANSPARENCY, StatisticMode.CLASSIFIER_ACCURACY, _ONE_SIDED),
    PropertyKind.EFFECTFUL_CHOICE: PropertyPreset(
        PropertyKind.EFFECTFUL_CHOICE, StatisticMode.CLASSIFIER_ACCURACY, _ONE_SIDED),
    PropertyKind.AD_CHOICE: PropertyPreset(
        PropertyKind.AD_CHOICE, StatisticMode.KEYWORD_COUNT,
        (Direction.GREATER_EQUAL, Direction.FLIPPED), bonferroni_h=2),
}


def get_preset(name) -> PropertyPreset:
    return PRESETS[PropertyKind(name)]


# --- running -----------------------------------------------------------------


def run_experiment(plan: ExperimentPlan, sut: Sut, out_dir: str | Path, concurrent: bool = True) -> Path:
    """Apply treatments and collect measurements, one block at a time.

    Within a block every agent finishes its treatment before any
    measurement is requested. On a protocol error the completed blocks
    are still written and an ``INCOMPLETE`` marker records the failure.
    """
    diags = validate_plan(plan)
    if diags:
        raise PlanValidationError(diags)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / PLAN_FILE).write_text(format_plan(plan))
    marker = out / INCOMPLETE_FILE
    if marker.exists():
        marker.unlink()

    assignment = assign(plan, plan.seed)
    wire = [[a.to_wire(plan.base_dir) for a in t.actions] for t in plan.treatments]
    m = plan.block_size
    logs: list[AgentLog] = []
    pool = ThreadPoolExecutor(m) if concurrent else None
    mapper = pool.map if pool else map

    def apply_all(agent: int, actions: list[dict]):
        for action in actions:
            sut.apply(agent, action)

    def measure(agent: int):
        return sut.collect(agent, plan.reloads), sut.settings(agent)

    try:
        for b in range(plan.block_count):
            labels = assignment.labels[b]
            agents = [b * m + a for a in range(m)]
            actions = [wire[1] if labels[a] else wire[0] for a in range(m)]
            list(mapper(apply_all, agents, actions))
            measured = list(mapper(measure, agents))
            for a, (ads, settings) in enumerate(measured):
                group = Group.EXPERIMENTAL if labels[a] else Group.CONTROL
                logs.append(AgentLog(plan.id, b, a, group, tuple(ads), frozenset(settings)))
    except SutProtocolError as exc:
        done = len(logs) // m
        write_logs(logs, out / LOG_FILE)
        marker.write_text(f"block {done}: {exc}\n")
        raise
    finally:
        if pool:
            pool.shutdown()
    write_logs(logs, out / LOG_FILE)
    return out


# --- analysis ----------------------------------------------------------------


@dataclass(frozen=True)
class SettingsDiff:
    table: dict[str, tuple[int, int]]
    equal: bool

    def to_json(self) -> dict:
        return {
            "equal": self.equal,
            "interests": {k: {"control": c, "experimental": e} for k, (c, e) in sorted(self.table.items())},
        }

    def render(self) -> str:
        lines = [f"settings identical across groups: {'yes' if self.equal else 'no'}"]
        if self.table:
            width = max(len("Interest"), *(len(k) for k in self.table))
            lines.append(f"{'Interest':<{width}}  {'control':>8}  {'experimental':>12}")
            for k, (c, e) in sorted(self.table.items()):
                lines.append(f"{k:<{width}}  {c:>8}  {e:>12}")
        return "\n".join(lines) + "\n"


def settings_diff(logs: Sequence[AgentLog]) -> SettingsDiff:
    """Agents per group holding each interest, and whether groups match exactly."""
    table: dict[str, list[int]] = {}
    profiles = {Group.CONTROL: Counter(), Group.EXPERIMENTAL: Counter()}
    for lg in logs:
        g = Group(lg.group)
        profiles[g][frozenset(lg.settings)] += 1
        for interest in lg.settings:
            table.setdefault(interest, [0, 0])[g is Group.EXPERIMENTAL] += 1
    equal = profiles[Group.CONTROL] == profiles[Group.EXPERIMENTAL]
    return SettingsDiff({k: (v[0], v[1]) for k, v in table.items()}, equal)


@dataclass(frozen=True)
class RunManifest:
    experiment_id: str
    preset: str
    statistic_mode: str
    seed: int
    samples: int
    chunk: int
    logs_digest: str
    results: tuple[TestResult, ...]
    plan: dict | None = None
    feature_kind: str | None = None
    keywords: tuple[str, ...] = ()
    split: dict | None = None
    chosen_C: float | None = None
    cv_table: dict | None = None
    vocabulary_size: int | None = None
    vocabulary_hash: str | None = None
    test_agents: int = 0
    accuracy: float | None = None
    keyword_appearances: dict | None = None
    corrections: dict = field(default_factory=dict)
    explanation: dict | None = None
    settings: dict | None = None

    def primary(self) -> TestResult:
        return self.results[0]

    def to_json(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "preset": self.preset,
            "statistic_mode": self.statistic_mode,
            "seed": self.seed,
            "samples": self.samples,
            "chunk": self.chunk,
            "logs_digest": self.logs_digest,
            "results": [r.to_json() for r in self.results],
            "plan": self.plan,
            "feature_kind": self.feature_kind,
            "keywords": list(self.keywords),
            "split": self.split,
            "chosen_C": self.chosen_C,
            "cv_table": self.cv_table,
            "vocabulary_size": self.vocabulary_size,
            "vocabulary_hash": self.vocabulary_hash,
            "test_agents": self.test_agents,
            "accuracy": self.accuracy,
            "keyword_appearances": self.keyword_appearances,
            "corrections": self.corrections,
            "explanation": self.explanation,
            "settings": self.settings,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "RunManifest":
        d = dict(d)
        d["results"] = tuple(TestResult.from_json(r) for r in d["results"])
        d["keywords"] = tuple(d.get("keywords", ()))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def _logs_digest(logs: Sequence[AgentLog]) -> str:
    h = hashlib.sha256()
    for lg in logs:
        h.update(dumps_log(lg).encode())
        h.update(b"\n")
    return h.hexdigest()


def _permutation_test(blocks, labels, statistic, direction, samples, seed, chunk, workers, cap):
    if count_patterns(blocks, labels) <= min(samples, cap):
        return exact_permutation_test(blocks, labels, statistic, direction, cap=cap, chunk=chunk)
    return sampled_permutation_test(blocks, labels, statistic, direction, samples=samples, seed=seed,
                                    chunk=chunk, workers=workers)


def _labels(logs) -> np.ndarray:
    return np.array([lg.group == Group.EXPERIMENTAL for lg in logs], dtype=bool)


def analyze_logs(
    logs: Sequence[AgentLog],
    preset: PropertyPreset | str,
    feature_kind: FeatureSetKind | str = FeatureSetKind.URL_TITLE,
    samples: int = 10**6,
    seed: int = 0,
    keywords: Sequence[str] = (),
    plan: ExperimentPlan | None = None,
    grid: Sequence[float] = clf.DEFAULT_C_GRID,
    top: int = 5,
    chunk: int = DEFAULT_CHUNK,
    workers: int = 1,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> RunManifest:
    if not isinstance(preset, PropertyPreset):
        preset = get_preset(preset)
    logs = sorted(logs, key=lambda lg: (lg.block_id, lg.agent_id))
    if not logs:
        raise ValueError("no logs to analyze")
    common = dict(
        experiment_id=logs[0].experiment_id,
        preset=preset.kind.value,
        statistic_mode=preset.statistic_mode.value,
        seed=seed,
        samples=samples,
        chunk=chunk,
        logs_digest="",
        plan=plan.to_dict() if plan is not None else None,
    )
    if preset.statistic_mode is StatisticMode.KEYWORD_COUNT:
        keywords = tuple(keywords) or (plan.keywords if plan is not None else ())
        manifest = _analyze_keywords(logs, preset, keywords, samples, seed, chunk, workers, cap, common)
    else:
        manifest = _analyze_classifier(logs, preset, FeatureSetKind(feature_kind), samples, seed, grid, top,
                                       chunk, workers, cap, common)
    # Serializing reads every group label, so the digest waits until the
    # statistic has been evaluated.
    return replace(manifest, logs_digest=_logs_digest(logs))


def _analyze_classifier(logs, preset, kind, samples, seed, grid, top, chunk, workers, cap, common):
    split = clf.train_test_split([lg.block_id for lg in logs])
    test_set = set(split.test_blocks)
    train_logs = [lg for lg in logs if lg.block_id not in test_set]
    test_logs = [lg for lg in logs if lg.block_id in test_set]

    vocab = build_vocabulary(kind, train_logs)
    d = len(vocab)
    X_train = to_matrix([vectorize(vocab, lg) for lg in train_logs], d)
    X_test = to_matrix([vectorize(vocab, lg) for lg in test_logs], d)
    train_blocks = [lg.block_id for lg in train_logs]

    y_train = _labels(train_logs)
    if min(int(y_train.sum()), int((~y_train).sum())) < 10:
        raise clf.TooFewExamplesError("need at least 10 training examples per class")
    if len(grid) > 1:
        cv_table = clf.cross_validate(X_train, y_train, grid, train_blocks)
        C = clf.choose_from_table(cv_table)
    else:
        cv_table, C = {grid[0]: None}, grid[0]
    w, b, trace = clf.fit_logistic(X_train, y_train, C)
    model = clf.LinearModel(w, b, C, vocab, trace)
    predictions = model.predict_matrix(X_test)

    # Test labels are first read here, after the model is fixed.
    y_test = _labels(test_logs)
    blocks = np.array([lg.block_id for lg in test_logs])

    def statistic(lab):
        return np.count_nonzero(lab == predictions, axis=1)

    results = tuple(
        _permutation_test(blocks, y_test, statistic, direction, samples, seed, chunk, workers, cap)
        for direction in preset.directions
    )
    X_all = np.vstack([X_train, X_test])
    explanation = clf.explain(model, top, X_all, np.concatenate([y_train, y_test]))
    settings = None
    if preset.kind is PropertyKind.TRANSPARENCY:
        settings = settings_diff(logs).to_json()
    return RunManifest(
        **common,
        results=results,
        feature_kind=kind.value,
        split={"train_blocks": list(split.train_blocks), "test_blocks": list(split.test_blocks)},
        chosen_C=C,
        cv_table={repr(float(c)): acc for c, acc in cv_table.items()},
        vocabulary_size=d,
        vocabulary_hash=vocab.digest(),
        test_agents=len(test_logs),
        accuracy=float(results[0].observed_statistic) / len(test_logs),
        explanation={
            "experimental": [e.to_json() for e in explanation.experimental],
            "control": [e.to_json() for e in explanation.control],
            "bias": model.bias,
        },
        settings=settings,
    )


def _analyze_keywords(logs, preset, keywords, samples, seed, chunk, workers, cap, common):
    if not keywords:
        raise ValueError("the ad-choice preset needs keywords (plan file or --keywords)")
    counts = keyword_counts(logs, keywords)
    labels = _labels(logs)
    blocks = np.array([lg.block_id for lg in logs])
    # Counting the group that kept the interest: large values mean the
    # removing (experimental) group saw fewer matching ads.
    statistic = keyword_label_statistic(counts, Group.CONTROL)
    results = tuple(
        _permutation_test(blocks, labels, statistic, direction, samples, seed, chunk, workers, cap)
        for direction in preset.directions
    )
    corrections = {
        "bonferroni": {
            Direction(r.direction).value: bonferroni(r.p_upper, preset.bonferroni_h) for r in results
        },
        "bonferroni_h": preset.bonferroni_h,
    }
    return RunManifest(
        **common,
        results=results,
        keywords=tuple(keywords),
        test_agents=len(logs),
        keyword_appearances={
            "control": int(counts[~labels].sum()),
            "experimental": int(counts[labels].sum()),
        },
        corrections=corrections,
    )


def load_run_plan(log_dir: str | Path) -> ExperimentPlan | None:
    path = Path(log_dir) / PLAN_FILE
    if path.is_file():
        return parse_plan(path.read_text(), base_dir=path.parent)
    return None


def analyze(
    log_dir: str | Path,
    preset,
    feature_kind=FeatureSetKind.URL_TITLE,
    samples: int = 10**6,
    seed: int = 0,
    **kwargs,
) -> RunManifest:
    log_dir = Path(log_dir)
    if (log_dir / INCOMPLETE_FILE).exists():
        raise ValueError(f"run in {log_dir} is incomplete: {(log_dir / INCOMPLETE_FILE).read_text().strip()}")
    kwargs.setdefault("plan", load_run_plan(log_dir))
    return analyze_logs(load_logs(log_dir), preset, feature_kind, samples, seed, **kwargs)


# --- reporting ---------------------------------------------------------------


def format_p(p: float | None) -> str:
    if p is None:
        return "n/a"
    if p == 0:
        return "0"
    return np.format_float_positional(p, precision=3, unique=True, fractional=False, trim="-")


def format_pct(x: float | None) -> str:
    return "-" if x is None else f"{round(100 * x)}%"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    for r in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(out) + "\n"


def render_manifest(manifest: RunManifest) -> str:
    """Plain-text report; a pure function of the manifest."""
    lines = [f"experiment: {manifest.experiment_id}", f"preset: {manifest.preset}"]
    if manifest.statistic_mode == StatisticMode.CLASSIFIER_ACCURACY.value:
        lines += [
            f"features: {manifest.feature_kind}",
            f"test blocks: {manifest.split['test_blocks']}",
            f"chosen C: {manifest.chosen_C!r}",
            f"accuracy: {format_pct(manifest.accuracy)} ({int(manifest.primary().observed_statistic)}"
            f"/{manifest.test_agents})",
        ]
    else:
        app = manifest.keyword_appearances
        lines += [
            f"keywords: {', '.join(manifest.keywords)}",
            f"matching ads: control {app['control']}, experimental {app['experimental']}",
        ]
    for r in manifest.results:
        lines.append(
            f"test [{Direction(r.direction).value}] {r.mode.value}: statistic {r.observed_statistic:g}, "
            f"{r.exceedances}/{r.samples} at least as extreme, p = {format_p(r.p_point)}, "
            f"reported p = {format_p(r.p_upper)}"
        )
    if manifest.corrections.get("bonferroni"):
        for direction, p in sorted(manifest.corrections["bonferroni"].items()):
            lines.append(f"bonferroni [{direction}]: {format_p(p)}")
    out = "\n".join(lines) + "\n"
    if manifest.explanation:
        for side in ("experimental", "control"):
            out += f"\nTop features for identifying the {side} group\n"
            rows = [
                [e["key"], f"{e['coefficient']:.3g}", str(e["agents"]["control"]),
                 str(e["agents"]["experimental"]), str(e["appearances"]["control"]),
                 str(e["appearances"]["experimental"])]
                for e in manifest.explanation[side]
            ]
            out += _table(["Feature", "Coefficient", "agents ctl", "agents exp", "total ctl", "total exp"], rows)
    if manifest.settings is not None:
        out += "\nsettings identical across groups: " + ("yes" if manifest.settings["equal"] else "no") + "\n"
    return out


@dataclass(frozen=True)
class FamilyReport:
    alpha: float
    rows: tuple[dict, ...]
    keyword_layout: bool

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "rows": list(self.rows)}

    def render(self) -> str:
        def adj(row):
            if row["adjusted"] is None:
                return "n/a"
            return format_p(row["adjusted"]) + ("*" if row["rejected"] else "")

        if self.keyword_layout:
            by_exp: dict[str, dict] = {}
            for row in self.rows:
                by_exp.setdefault(row["experiment"], {})[row["direction"]] = row
            order = sorted(by_exp, key=lambda e: (by_exp[e]["ge"]["p"], e))
            rows = []
            for e in order:
                ge, fl = by_exp[e]["ge"], by_exp[e]["flipped"]
                rows.append([e, format_p(ge["p"]), format_p(ge["bonferroni"]), adj(ge),
                             format_p(fl["p"]), format_p(fl["bonferroni"]), adj(fl)])
            header = ["Experiment", "Unadj. p", "Bonferroni p", "Holm-Bonferroni p",
                      "Unadj. flipped p", "Bonferroni flipped p", "Holm-Bonferroni flipped p"]
        else:
            rows = [[r["experiment"], format_pct(r.get("accuracy")), format_p(r["p"]), adj(r)] for r in self.rows]
            header = ["Experiment", "Accuracy", "Unadj. p-value", "Adj. p-value"]
        return _table(header, rows) + "* significant under Holm-Bonferroni at alpha = " + f"{self.alpha:g}\n"


def summarize_family(manifests: Sequence[RunManifest], alpha: float = 0.05) -> FamilyReport:
    """Holm-Bonferroni over every hypothesis the manifests tested."""
    if not manifests:
        raise ValueError("a family needs at least one manifest")
    info = {}
    entries = []
    for m in manifests:
        for r in m.results:
            direction = Direction(r.direction).value
            name = m.experiment_id if direction == "ge" else f"{m.experiment_id} (flipped)"
            if name in info:
                raise ValueError(f"duplicate experiment in family: {name}")
            bonf = m.corrections.get("bonferroni", {}).get(direction)
            info[name] = {"experiment": m.experiment_id, "direction": direction,
                          "accuracy": m.accuracy, "bonferroni": bonf}
            entries.append((name, r.p_upper))
    holm = holm_bonferroni(HypothesisFamily(tuple(entries), alpha))
    rows = tuple(
        {**info[h.name], "name": h.name, "p": h.p, "adjusted": h.adjusted, "rejected": h.rejected}
        for h in holm
    )
    keyword_layout = all(m.statistic_mode == StatisticMode.KEYWORD_COUNT.value for m in manifests) and all(
        len(m.results) == 2 for m in manifests
    )
    return FamilyReport(alpha, rows, keyword_layout)
