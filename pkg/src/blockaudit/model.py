"""Domain types for block-randomized ad experiments.

An experiment plan names two treatments (control and experimental), the
block layout, and how many page reloads each agent collects ads over.
Agents produce one ``AgentLog`` each; logs are persisted as JSON lines.
"""

from __future__ import annotations

import configparser
import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

MAX_SEED = 2**64 - 1


class PlanError(ValueError):
    """A plan file could not be parsed."""


class LogFormatError(ValueError):
    """A measurement log line is malformed."""


class DuplicateAgentError(ValueError):
    """Two log records share the same (block_id, agent_id)."""


class Group(str, enum.Enum):
    CONTROL = "control"
    EXPERIMENTAL = "experimental"


ACTION_KINDS = ("visit_url_list", "set_setting", "remove_interest", "opt_out", "idle")


@dataclass(frozen=True)
class Action:
    """One scripted step of a treatment.

    Only the fields relevant to ``kind`` are set: ``path`` for
    ``visit_url_list``, ``key``/``value`` for ``set_setting`` and
    ``keyword`` for ``remove_interest``.
    """

    kind: str
    path: str | None = None
    key: str | None = None
    value: str | None = None
    keyword: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise PlanError(f"unknown action kind: {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Action":
        kind, _, arg = text.strip().partition(":")
        kind, arg = kind.strip(), arg.strip()
        if kind == "visit_url_list":
            if not arg:
                raise PlanError("visit_url_list needs a path")
            return cls(kind, path=arg)
        if kind == "set_setting":
            key, eq, value = arg.partition("=")
            if not eq or not key.strip():
                raise PlanError(f"set_setting needs KEY=VALUE, got {arg!r}")
            return cls(kind, key=key.strip(), value=value.strip())
        if kind == "remove_interest":
            if not arg:
                raise PlanError("remove_interest needs a keyword")
            return cls(kind, keyword=arg)
        if kind in ("opt_out", "idle"):
            if arg:
                raise PlanError(f"{kind} takes no argument")
            return cls(kind)
        raise PlanError(f"unknown action kind: {kind!r}")

    def format(self) -> str:
        if self.kind == "visit_url_list":
            return f"visit_url_list:{self.path}"
        if self.kind == "set_setting":
            return f"set_setting:{self.key}={self.value}"
        if self.kind == "remove_interest":
            return f"remove_interest:{self.keyword}"
        return self.kind

    def to_wire(self, base_dir: Path | None = None) -> dict:
        """JSON form sent to a system under test; URL lists are inlined."""
        out: dict = {"kind": self.kind}
        if self.kind == "visit_url_list":
            out["path"] = self.path
            out["urls"] = read_url_list(resolve_path(self.path, base_dir))
        elif self.kind == "set_setting":
            out["key"], out["value"] = self.key, self.value
        elif self.kind == "remove_interest":
            out["keyword"] = self.keyword
        return out


def resolve_path(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = base_dir / p
    return p


def read_url_list(path: Path) -> list[str]:
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


@dataclass(frozen=True)
class Treatment:
    name: str
    actions: tuple[Action, ...] = ()


@dataclass(frozen=True)
class ExperimentPlan:
    id: str
    treatments: tuple[Treatment, ...]
    block_count: int
    block_size: int = 10
    collect_site: str = "toi"
    reloads: int = 10
    reload_wait_ms: int = 5000
    seed: int = 0
    keywords: tuple[str, ...] = ()
    sim: str = "null"
    base_dir: Path | None = field(default=None, compare=False)

    @property
    def control(self) -> Treatment:
        return self.treatments[0]

    @property
    def experimental(self) -> Treatment:
        return self.treatments[1]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "block_count": self.block_count,
            "block_size": self.block_size,
            "collect_site": self.collect_site,
            "reloads": self.reloads,
            "reload_wait_ms": self.reload_wait_ms,
            "seed": self.seed,
            "treatments": [
                {"name": t.name, "actions": [a.format() for a in t.actions]}
                for t in self.treatments
            ],
            "keywords": list(self.keywords),
            "sim": self.sim,
        }


_INT_FIELDS = ("block_count", "block_size", "reloads", "reload_wait_ms", "seed")
_PLAN_KEYS = {
    "id", "collect_site", "keywords", "sim",
    "control.name", "control.actions", "experimental.name", "experimental.actions",
    *_INT_FIELDS,
}


def parse_plan(text: str, base_dir: Path | None = None) -> ExperimentPlan:
    """Parse the flat ``key = value`` plan format.

    Treatment actions are ``;``-separated, e.g.
    ``experimental.actions = visit_url_list:urls/rehab.txt; opt_out``.
    """
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[plan]\n" + text)
    except configparser.Error as exc:
        raise PlanError(str(exc)) from exc
    raw = dict(cp["plan"])
    unknown = sorted(set(raw) - _PLAN_KEYS)
    if unknown:
        raise PlanError(f"unknown plan keys: {', '.join(unknown)}")
    for required in ("id", "block_count"):
        if required not in raw:
            raise PlanError(f"missing required key: {required}")

    ints = {}
    for name in _INT_FIELDS:
        if name in raw:
            try:
                ints[name] = int(raw[name])
            except ValueError:
                raise PlanError(f"{name} must be an integer, got {raw[name]!r}") from None

    def treatment(prefix: str, default_name: str) -> Treatment:
        actions = raw.get(f"{prefix}.actions", "")
        parsed = tuple(Action.parse(a) for a in actions.split(";") if a.strip())
        return Treatment(raw.get(f"{prefix}.name", default_name).strip(), parsed)

    keywords = tuple(k.strip().lower() for k in raw.get("keywords", "").split(",") if k.strip())
    return ExperimentPlan(
        id=raw["id"].strip(),
        treatments=(treatment("control", "control"), treatment("experimental", "experimental")),
        collect_site=raw.get("collect_site", "toi").strip(),
        keywords=keywords,
        sim=raw.get("sim", "null").strip(),
        base_dir=base_dir,
        **ints,
    )


def load_plan(path: str | Path) -> ExperimentPlan:
    path = Path(path)
    return parse_plan(path.read_text(), base_dir=path.parent)


def format_plan(plan: ExperimentPlan) -> str:
    lines = [
        f"id = {plan.id}",
        f"block_count = {plan.block_count}",
        f"block_size = {plan.block_size}",
        f"collect_site = {plan.collect_site}",
        f"reloads = {plan.reloads}",
        f"reload_wait_ms = {plan.reload_wait_ms}",
        f"seed = {plan.seed}",
    ]
    for prefix, t in zip(("control", "experimental"), plan.treatments):
        lines.append(f"{prefix}.name = {t.name}")
        lines.append(f"{prefix}.actions = {'; '.join(a.format() for a in t.actions)}")
    if plan.keywords:
        lines.append(f"keywords = {', '.join(plan.keywords)}")
    lines.append(f"sim = {plan.sim}")
    return "\n".join(lines) + "\n"


def validate_plan(plan: ExperimentPlan) -> list[str]:
    """Return one diagnostic per violated invariant; empty means valid."""
    diags = []
    if not plan.id:
        diags.append("id must be nonempty")
    if len(plan.treatments) != 2:
        diags.append("treatments: exactly two treatments required")
    names = [t.name for t in plan.treatments]
    if any(not n for n in names):
        diags.append("treatments: name must be nonempty")
    if len(set(names)) != len(names):
        diags.append("treatments: names must be unique")
    if plan.block_count < 1:
        diags.append("block_count must be positive")
    if plan.block_size < 1:
        diags.append("block_size must be positive")
    elif plan.block_size % 2:
        diags.append("block_size must be even")
    if plan.reloads < 1:
        diags.append("reloads must be positive")
    if plan.reload_wait_ms < 0:
        diags.append("reload_wait_ms must be nonnegative")
    if not 0 <= plan.seed <= MAX_SEED:
        diags.append("seed must be a 64-bit unsigned integer")
    for t in plan.treatments:
        for a in t.actions:
            if a.kind == "visit_url_list":
                p = resolve_path(a.path, plan.base_dir)
                if not p.is_file():
                    diags.append(f"file not found: {a.path}")
    return diags


@dataclass(frozen=True)
class AdRecord:
    title: str
    url: str
    text: str = ""
    reload_index: int = 0
    slot_index: int = 0

    def __post_init__(self):
        if not self.title and not self.url:
            raise ValueError("ad must have a title or a url")

    def to_json(self) -> dict:
        return {
            "title": self.title,
            "url": self.url,
            "text": self.text,
            "reload": self.reload_index,
            "slot": self.slot_index,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AdRecord":
        return cls(d["title"], d["url"], d["text"], int(d["reload"]), int(d["slot"]))


@dataclass(frozen=True)
class AgentLog:
    experiment_id: str
    block_id: int
    agent_id: int
    group: Group
    ads: tuple[AdRecord, ...] = ()
    settings: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "block_id": self.block_id,
            "agent_id": self.agent_id,
            "group": Group(self.group).value,
            "ads": [ad.to_json() for ad in self.ads],
            "settings": sorted(self.settings),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AgentLog":
        return cls(
            experiment_id=d["experiment_id"],
            block_id=int(d["block_id"]),
            agent_id=int(d["agent_id"]),
            group=Group(d["group"]),
            ads=tuple(AdRecord.from_json(a) for a in d["ads"]),
            settings=frozenset(d["settings"]),
        )

    def with_group(self, group: Group) -> "AgentLog":
        return replace(self, group=group)


_LOG_KEYS = {"experiment_id", "block_id", "agent_id", "group", "ads", "settings"}
_AD_KEYS = {"title", "url", "text", "reload", "slot"}


def dumps_log(log: AgentLog) -> str:
    return json.dumps(log.to_json(), separators=(",", ":"), ensure_ascii=False)


def _parse_line(line: str, where: str) -> AgentLog:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{where}: invalid JSON ({exc.msg})") from None
    if not isinstance(d, dict) or set(d) != _LOG_KEYS:
        raise LogFormatError(f"{where}: record must have exactly the fields {sorted(_LOG_KEYS)}")
    if not isinstance(d["ads"], list) or any(
        not isinstance(a, dict) or set(a) != _AD_KEYS for a in d["ads"]
    ):
        raise LogFormatError(f"{where}: each ad must have exactly the fields {sorted(_AD_KEYS)}")
    if len(set(d["settings"])) != len(d["settings"]):
        raise LogFormatError(f"{where}: duplicate settings entries")
    try:
        return AgentLog.from_json(d)
    except (TypeError, ValueError) as exc:
        raise LogFormatError(f"{where}: {exc}") from None


def load_logs(directory: str | Path) -> list[AgentLog]:
    """Read every ``*.jsonl`` file in ``directory``, sorted by (block, agent)."""
    logs = []
    seen: dict[tuple[int, int], str] = {}
    for path in sorted(Path(directory).glob("*.jsonl")):
        for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            log = _parse_line(line, where)
            key = (log.block_id, log.agent_id)
            if key in seen:
                raise DuplicateAgentError(
                    f"{where}: duplicate agent (block {key[0]}, agent {key[1]}), first at {seen[key]}"
                )
            seen[key] = where
            logs.append(log)
    logs.sort(key=lambda lg: (lg.block_id, lg.agent_id))
    return logs


def write_logs(logs: Iterable[AgentLog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for log in sorted(logs, key=lambda lg: (lg.block_id, lg.agent_id)):
            fh.write(dumps_log(log) + "\n")


def block_ids(logs: Sequence[AgentLog]) -> list[int]:
    return sorted({lg.block_id for lg in logs})
