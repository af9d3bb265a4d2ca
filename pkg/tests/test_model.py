import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockaudit.model import (
    Action,
    AdRecord,
    AgentLog,
    DuplicateAgentError,
    Group,
    LogFormatError,
    PlanError,
    dumps_log,
    format_plan,
    load_logs,
    load_plan,
    parse_plan,
    validate_plan,
    write_logs,
)

from conftest import make_log, make_plan


def test_default_plan_is_valid():
    assert validate_plan(make_plan(k=100, m=10)) == []


def test_odd_block_size():
    assert validate_plan(make_plan(k=1, m=3)) == ["block_size must be even"]


def test_missing_url_list(tmp_path):
    plan = make_plan(experimental_actions=[Action("visit_url_list", path="nope.txt")], base_dir=tmp_path)
    assert validate_plan(plan) == ["file not found: nope.txt"]


def test_other_diagnostics():
    plan = make_plan(k=0, m=2, reloads=0, reload_wait_ms=-1, seed=-5)
    diags = validate_plan(plan)
    assert "block_count must be positive" in diags
    assert "reloads must be positive" in diags
    assert "reload_wait_ms must be nonnegative" in diags
    assert "seed must be a 64-bit unsigned integer" in diags


def test_duplicate_treatment_names():
    plan = make_plan()
    from dataclasses import replace
    from blockaudit.model import Treatment

    plan = replace(plan, treatments=(Treatment("a"), Treatment("a")))
    assert validate_plan(plan) == ["treatments: names must be unique"]


def test_plan_file_round_trip(tmp_path, url_list):
    text = """
# substance abuse transparency run
id = subs
block_count = 4
block_size = 10
seed = 12
control.name = null
experimental.name = substance
experimental.actions = visit_url_list:rehab.txt; set_setting:gender=female; remove_interest:dating; opt_out
keywords = Dating, romance
sim = opacity
"""
    path = tmp_path / "plan.cfg"
    path.write_text(text)
    plan = load_plan(path)
    assert plan.reloads == 10 and plan.reload_wait_ms == 5000
    assert plan.control.actions == ()
    assert [a.kind for a in plan.experimental.actions] == [
        "visit_url_list", "set_setting", "remove_interest", "opt_out"]
    assert plan.keywords == ("dating", "romance")
    assert validate_plan(plan) == []
    again = parse_plan(format_plan(plan), base_dir=tmp_path)
    assert again == plan


@pytest.mark.parametrize("text", [
    "block_count = 2\n",
    "id = x\nblock_count = two\n",
    "id = x\nblock_count = 2\ncolour = red\n",
    "id = x\nblock_count = 2\nexperimental.actions = teleport\n",
    "id = x\nblock_count = 2\nexperimental.actions = set_setting:gender\n",
])
def test_bad_plan_text(text):
    with pytest.raises(PlanError):
        parse_plan(text)


def test_action_wire_form_inlines_urls(tmp_path, url_list):
    wire = Action("visit_url_list", path="rehab.txt").to_wire(tmp_path)
    assert wire == {"kind": "visit_url_list", "path": "rehab.txt",
                    "urls": ["www.thewatershed.com", "www.rehabs.com"]}


def test_ad_needs_title_or_url():
    AdRecord("", "Ads by Google")
    AdRecord("Title", "")
    with pytest.raises(ValueError):
        AdRecord("", "")


def test_load_empty_directory(tmp_path):
    assert load_logs(tmp_path) == []


def test_load_sorts_by_block_then_agent(tmp_path):
    a = make_log(1, 0, "e", [("T", "u.com")])
    b = make_log(0, 1, "c", settings=["Fitness"])
    (tmp_path / "x.jsonl").write_text(dumps_log(a) + "\n" + dumps_log(b) + "\n")
    logs = load_logs(tmp_path)
    assert [(lg.block_id, lg.agent_id) for lg in logs] == [(0, 1), (1, 0)]
    assert logs[0].settings == frozenset({"Fitness"})
    assert logs[1].group is Group.EXPERIMENTAL


def test_duplicate_agent_rejected(tmp_path):
    a = make_log(0, 0, "e")
    (tmp_path / "x.jsonl").write_text(dumps_log(a) + "\n" + dumps_log(a) + "\n")
    with pytest.raises(DuplicateAgentError, match="x.jsonl:2"):
        load_logs(tmp_path)


def test_parse_error_reports_line(tmp_path):
    good = dumps_log(make_log(0, 0, "c"))
    (tmp_path / "x.jsonl").write_text(good + "\n{not json\n")
    with pytest.raises(LogFormatError, match="x.jsonl:2"):
        load_logs(tmp_path)


def test_schema_is_strict(tmp_path):
    d = make_log(0, 0, "c").to_json()
    d["timestamp"] = 1
    (tmp_path / "x.jsonl").write_text(json.dumps(d) + "\n")
    with pytest.raises(LogFormatError, match="exactly the fields"):
        load_logs(tmp_path)


def test_schema_field_names():
    d = make_log(0, 3, "e", [("T", "u.com", "body")], ["b", "a"]).to_json()
    assert d == {
        "experiment_id": "exp", "block_id": 0, "agent_id": 3, "group": "experimental",
        "ads": [{"title": "T", "url": "u.com", "text": "body", "reload": 0, "slot": 0}],
        "settings": ["a", "b"],
    }


text_st = st.text(alphabet=st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=12)
ad_st = st.builds(
    AdRecord, title=text_st.filter(bool), url=text_st, text=text_st,
    reload_index=st.integers(0, 9), slot_index=st.integers(0, 4),
)


@st.composite
def log_sets(draw):
    keys = draw(st.sets(st.tuples(st.integers(0, 5), st.integers(0, 9)), max_size=8))
    return [
        AgentLog("exp", b, a, draw(st.sampled_from(Group)), tuple(draw(st.lists(ad_st, max_size=4))),
                 frozenset(draw(st.lists(text_st, max_size=3))))
        for b, a in keys
    ]


@given(log_sets())
def test_round_trip_is_byte_identical(tmp_path_factory, logs):
    d = tmp_path_factory.mktemp("rt")
    write_logs(logs, d / "a.jsonl")
    loaded = load_logs(d)
    write_logs(loaded, d / "b.jsonl.out")
    assert (d / "a.jsonl").read_bytes() == (d / "b.jsonl.out").read_bytes()
    assert sorted(logs, key=lambda lg: (lg.block_id, lg.agent_id)) == loaded
