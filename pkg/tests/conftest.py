import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from blockaudit.harness import RunManifest, StatisticMode
from blockaudit.model import Action, AdRecord, AgentLog, ExperimentPlan, Group, Treatment
from blockaudit.stats import Direction, Mode, TestResult

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = Path(__file__).parent / "data"


def make_plan(k=2, m=2, seed=0, experimental_actions=(), sim="null", keywords=(), base_dir=None, **kw):
    return ExperimentPlan(
        id=kw.pop("id", "exp"),
        treatments=(Treatment("control"), Treatment("experimental", tuple(experimental_actions))),
        block_count=k,
        block_size=m,
        seed=seed,
        sim=sim,
        keywords=tuple(keywords),
        base_dir=base_dir,
        **kw,
    )


def make_log(block, agent, group, ads=(), settings=(), experiment_id="exp"):
    ads = tuple(
        a if isinstance(a, AdRecord) else AdRecord(a[0], a[1], a[2] if len(a) > 2 else "", 0, i)
        for i, a in enumerate(ads)
    )
    g = Group.EXPERIMENTAL if group in (True, "e", Group.EXPERIMENTAL) else Group.CONTROL
    return AgentLog(experiment_id, block, agent, g, ads, frozenset(settings))


def make_manifest(name, ps, accuracy=None, mode=StatisticMode.CLASSIFIER_ACCURACY):
    dirs = (Direction.GREATER_EQUAL, Direction.FLIPPED)
    results = tuple(TestResult(0.0, 0, 10**6, Mode.SAMPLED, p, p, d) for p, d in zip(ps, dirs))
    corrections = {}
    if len(ps) == 2:
        corrections = {"bonferroni": {d.value: 2 * p for p, d in zip(ps, dirs)}, "bonferroni_h": 2}
    return RunManifest(name, "x", mode.value, 0, 10**6, 100_000, "", results, accuracy=accuracy,
                       corrections=corrections)


@pytest.fixture
def url_list(tmp_path):
    path = tmp_path / "rehab.txt"
    path.write_text("www.thewatershed.com\nwww.rehabs.com\n")
    return path


# Acceptance criteria report: one line per criterion after the run.
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    info = getattr(report, "criterion", None)
    if info is not None:
        n, text = info
        entry = _CRITERIA.setdefault(n, [text, True])
        entry[1] = entry[1] and report.passed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        text, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {text}")
