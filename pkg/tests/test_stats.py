import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockaudit.model import Group
from blockaudit.randomizer import EnumerationCapExceeded, assign
from blockaudit.simulator import Simulator, scenario
from blockaudit.stats import (
    Direction,
    HypothesisFamily,
    Mode,
    TestResult,
    bonferroni,
    clopper_pearson_upper,
    exact_permutation_test,
    holm_bonferroni,
    keyword_counts,
    keyword_label_statistic,
    keyword_statistic,
    sampled_permutation_test,
    units_from_logs,
)

from conftest import make_log, make_plan


def constant(lab):
    return np.zeros(len(lab))


def test_exact_constant_statistic():
    res = exact_permutation_test([0, 0, 1, 1], [True, False, False, True], constant)
    assert res.p_point == res.p_upper == 1.0
    assert res.mode is Mode.EXACT and res.samples == 4


def test_exact_single_pair():
    res = exact_permutation_test([0, 0], [True, False], lambda lab: lab[:, 0].astype(float))
    assert res.p_point == 0.5


def test_exact_two_pairs():
    observed = np.array([True, False, True, False])
    res = exact_permutation_test(
        [0, 0, 1, 1], observed, lambda lab: (lab & observed).sum(axis=1).astype(float))
    assert res.observed_statistic == 2 and res.p_point == 0.25


def test_exact_cap_points_to_sampled():
    blocks = np.repeat(np.arange(100), 10)
    labels = np.tile([True] * 5 + [False] * 5, 100)
    with pytest.raises(EnumerationCapExceeded, match="sampled"):
        exact_permutation_test(blocks, labels, constant)


def test_sampled_constant_statistic():
    res = sampled_permutation_test([0, 0, 1, 1], [True, False, True, False], constant, samples=1000)
    assert res.exceedances == 1000 and res.p_point == 1.0 and res.p_upper == 1.0


def test_sampled_is_deterministic_and_worker_independent():
    rng = np.random.default_rng(0)
    w = rng.normal(size=8)
    blocks, labels = [0] * 4 + [1] * 4, [True, True, False, False] * 2

    def stat(lab):
        return lab @ w

    a = sampled_permutation_test(blocks, labels, stat, samples=25_000, seed=3, chunk=4000)
    b = sampled_permutation_test(blocks, labels, stat, samples=25_000, seed=3, chunk=4000, workers=4)
    assert a == b


@pytest.mark.parametrize("seed", range(5))
def test_sampled_matches_exact(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=8)
    blocks = [0] * 4 + [1] * 4
    labels = np.array([rng.permutation([True, True, False, False]) for _ in range(2)]).ravel()
    exact = exact_permutation_test(blocks, labels, lambda lab: lab @ w)
    samp = sampled_permutation_test(blocks, labels, lambda lab: lab @ w, samples=100_000, seed=seed)
    se = math.sqrt(exact.p_point * (1 - exact.p_point) / 100_000)
    assert abs(samp.p_point - exact.p_point) <= 3 * se + 1e-12
    assert samp.p_upper >= samp.p_point


def test_result_json_round_trip():
    res = TestResult(3.0, 0, 10**6, Mode.SAMPLED, 0.0, 5.3e-6, Direction.FLIPPED)
    d = res.to_json()
    assert set(d) == {"statistic", "exceedances", "samples", "mode", "p_point", "p_upper", "direction"}
    assert d["mode"] == "sampled" and d["direction"] == "flipped"
    assert TestResult.from_json(d) == res


def _binom_cdf(L, n, p):
    # log-space tail sum, independent of scipy
    if p <= 0:
        return 1.0
    if p >= 1:
        return 0.0 if L < n else 1.0
    lp, lq = math.log(p), math.log1p(-p)
    terms = [math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1) + j * lp + (n - j) * lq
             for j in range(L + 1)]
    top = max(terms)
    return math.exp(top) * math.fsum(math.exp(t - top) for t in terms)


def bisect_upper(L, n, tail=0.005):
    lo, hi = L / n, 1.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if _binom_cdf(L, n, mid) > tail:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return (lo + hi) / 2


@pytest.mark.parametrize("L,n", [(0, 10**6), (5, 100), (0, 1), (3, 7), (40, 1000)])
def test_clopper_pearson_against_bisection(L, n):
    assert clopper_pearson_upper(L, n) == pytest.approx(bisect_upper(L, n), abs=1e-10)


def test_clopper_pearson_examples():
    assert clopper_pearson_upper(10, 10) == 1.0
    assert clopper_pearson_upper(0, 10**6) == pytest.approx(1 - 0.005 ** (1e-6), abs=1e-12)
    assert round(clopper_pearson_upper(0, 10**6), 7) == 0.0000053
    with pytest.raises(ValueError):
        clopper_pearson_upper(5, 4)


@given(st.integers(1, 5000), st.data())
def test_clopper_pearson_monotone(n, data):
    L = data.draw(st.integers(0, n - 1))
    lo, hi = clopper_pearson_upper(L, n), clopper_pearson_upper(L + 1, n)
    assert lo <= hi
    assert lo >= L / n and hi >= (L + 1) / n


@pytest.mark.parametrize("seed", range(5))
def test_flip_identity(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=6)
    blocks = [0, 0, 1, 1, 1, 1]
    labels = [True, False, True, True, False, False]
    ge = exact_permutation_test(blocks, labels, lambda lab: lab @ w)
    fl = exact_permutation_test(blocks, labels, lambda lab: lab @ w, direction=Direction.FLIPPED)
    assert ge.p_point + fl.p_point == pytest.approx(1 + 1 / ge.samples, abs=1e-12)


def test_keyword_statistic_examples():
    dating = ("Top 5 Online Dating Sites", "consumer-rankings.com")
    logs = [make_log(0, 0, "e", [dating] * 3), make_log(0, 1, "c", [("Cheap Flights", "f.com")])]
    assert keyword_statistic(logs, ["dating"], Group.EXPERIMENTAL) == 3
    assert keyword_statistic(logs, ["dating"], Group.CONTROL) == 0
    assert keyword_counts([make_log(0, 0, "c", [("Hi", "x.com", "find ROMANCE")])], ["romance"]).tolist() == [1]
    with pytest.raises(ValueError):
        keyword_counts(logs, [])


def test_keyword_statistic_kept_vs_removed_fixture():
    ad = ("Are You Single?", "www.zoosk.com/Dating", "free dating app")
    other = ("Cheap Flights", "f.com")
    logs = []
    kept, removed = [22, 22, 22, 22, 21], [7, 7, 7, 7, 6]
    for a in range(5):
        logs.append(make_log(0, 2 * a, "c", [ad] * kept[a] + [other] * 3))
        logs.append(make_log(0, 2 * a + 1, "e", [ad] * removed[a] + [other] * 3))
    assert keyword_statistic(logs, ["dating"], Group.CONTROL) == 109
    assert keyword_statistic(logs, ["dating"], Group.EXPERIMENTAL) == 34
    counts = keyword_counts(logs, ["dating"])
    _, labels = units_from_logs(logs)
    stat = keyword_label_statistic(counts, Group.CONTROL)
    assert stat(labels[None, :]).tolist() == [109]


def test_bonferroni():
    assert bonferroni(0.0076, 2) == pytest.approx(0.0152, abs=1e-15)
    assert bonferroni(0.9970, 2) == pytest.approx(1.994, abs=1e-15)
    assert bonferroni(0.0, 7) == 0.0
    with pytest.raises(ValueError):
        bonferroni(0.1, 0)


def _adj(family):
    return [(e.name, None if e.adjusted is None else round(e.adjusted, 7), e.rejected) for e in family]


def test_holm_single():
    (e,) = holm_bonferroni(HypothesisFamily((("only", 0.01),)))
    assert e.adjusted == 0.01 and e.rejected


def test_holm_five():
    fam = HypothesisFamily(tuple(zip("abcde", [0.0000053, 0.12, 0.14, 0.20, 0.77])))
    got = _adj(holm_bonferroni(fam))
    assert got == [("a", 0.0000265, True), ("b", 0.48, False), ("c", None, False),
                   ("d", None, False), ("e", None, False)]


def test_holm_invariant_to_tie_order():
    ps = [("x", 0.01), ("y", 0.01), ("z", 0.06), ("w", 0.01)]
    a = holm_bonferroni(HypothesisFamily(tuple(ps)))
    b = holm_bonferroni(HypothesisFamily(tuple(reversed(ps))))
    assert a == b
    assert {e.name for e in a if e.rejected} == {"w", "x", "y"}


@given(st.lists(st.tuples(st.text(min_size=1, max_size=3), st.sampled_from([0.001, 0.01, 0.02, 0.3])),
                min_size=1, max_size=8, unique_by=lambda t: t[0]), st.randoms())
def test_holm_rejections_order_free(entries, rnd):
    shuffled = list(entries)
    rnd.shuffle(shuffled)
    a = {e.name for e in holm_bonferroni(HypothesisFamily(tuple(entries))) if e.rejected}
    b = {e.name for e in holm_bonferroni(HypothesisFamily(tuple(shuffled))) if e.rejected}
    assert a == b


def test_family_validation():
    with pytest.raises(ValueError):
        HypothesisFamily(())
    with pytest.raises(ValueError):
        HypothesisFamily((("a", 1.5),))


def test_null_calibration_small_blocks():
    # k=2, m=4 under the null simulator; the statistic counts ads for pool
    # entry 0 in the experimental group.
    plan = make_plan(k=2, m=4)
    config = scenario("null")
    target = config.ad_pool[0].url
    rejections = 0
    for run in range(1000):
        sim = Simulator(scenario("null", seed=run))
        counts = np.array([sum(ad.url == target for ad in sim.collect(a, 10)) for a in range(8)])
        labels = assign(plan, run).flat()
        res = exact_permutation_test([0] * 4 + [1] * 4, labels, lambda lab: lab @ counts)
        rejections += res.p_point <= 0.05
    assert rejections / 1000 <= 0.07


def test_holm_five_with_ties():
    fam = HypothesisFamily(tuple(zip("abcde", [0.0000053, 0.0000053, 0.041, 0.070, 0.41])))
    got = [a for _, a, _ in _adj(holm_bonferroni(fam))]
    assert got == [0.0000265, 0.0000212, 0.123, None, None]
