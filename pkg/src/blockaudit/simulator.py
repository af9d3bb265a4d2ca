"""A configurable blackbox ad server and the line-delimited JSON SUT protocol.

The engine talks to any system under test (SUT) through three calls:
``apply(agent, action)``, ``collect(agent, reloads)`` and
``settings(agent)``. ``Simulator`` implements them in process;
``serve_stream``/``SimulatorServer`` expose one over a byte stream and
``TcpSut`` is the matching client.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Protocol, Sequence

import numpy as np

from .model import AdRecord
from .randomizer import make_rng


class SutProtocolError(RuntimeError):
    """The SUT sent something that is not a valid protocol response."""


class Sut(Protocol):
    def apply(self, agent: int, action: dict) -> None: ...

    def collect(self, agent: int, reloads: int) -> list[AdRecord]: ...

    def settings(self, agent: int) -> set[str]: ...


@dataclass(frozen=True)
class ActionPattern:
    """Matches an agent's history if any applied action matches.

    ``kind="any"`` matches every history, including an empty one;
    ``negate`` inverts the result.
    """

    kind: str
    url: str | None = None
    key: str | None = None
    value: str | None = None
    keyword: str | None = None
    negate: bool = False

    def _matches_action(self, action: dict) -> bool:
        if action.get("kind") != self.kind:
            return False
        if self.kind == "visit_url_list" and self.url is not None:
            return any(self.url in u for u in action.get("urls", ()))
        if self.kind == "set_setting":
            if self.key is not None and action.get("key") != self.key:
                return False
            if self.value is not None and action.get("value") != self.value:
                return False
        if self.kind == "remove_interest" and self.keyword is not None:
            return str(action.get("keyword", "")).lower() == self.keyword.lower()
        return True

    def matches(self, history: Sequence[dict]) -> bool:
        hit = True if self.kind == "any" else any(self._matches_action(a) for a in history)
        return hit != self.negate


@dataclass(frozen=True)
class PoolAd:
    title: str
    url: str
    text: str
    base_weight: float


@dataclass(frozen=True)
class Effect:
    trigger: ActionPattern
    ad_index: int
    weight_multiplier: float


@dataclass(frozen=True)
class SettingsRule:
    pattern: ActionPattern
    interest: str


@dataclass(frozen=True)
class SimulatorConfig:
    ad_pool: tuple[PoolAd, ...]
    effects: tuple[Effect, ...] = ()
    settings_rules: tuple[SettingsRule, ...] = ()
    slots_per_reload: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.slots_per_reload < 1:
            raise ValueError("slots_per_reload must be positive")
        if len(self.ad_pool) < self.slots_per_reload:
            raise ValueError(
                f"ad pool of {len(self.ad_pool)} is smaller than slots_per_reload={self.slots_per_reload}"
            )
        for ad in self.ad_pool:
            if not (np.isfinite(ad.base_weight) and ad.base_weight > 0):
                raise ValueError(f"base weight must be finite and positive: {ad!r}")
        for e in self.effects:
            if not 0 <= e.ad_index < len(self.ad_pool):
                raise ValueError(f"effect references ad {e.ad_index} outside the pool")
            if e.weight_multiplier < 0:
                raise ValueError("weight multipliers must be nonnegative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SimulatorConfig":
        return cls(
            ad_pool=tuple(PoolAd(**a) for a in d["ad_pool"]),
            effects=tuple(
                Effect(ActionPattern(**e["trigger"]), e["ad_index"], e["weight_multiplier"])
                for e in d.get("effects", ())
            ),
            settings_rules=tuple(
                SettingsRule(ActionPattern(**r["pattern"]), r["interest"]) for r in d.get("settings_rules", ())
            ),
            slots_per_reload=d.get("slots_per_reload", 5),
            seed=d.get("seed", 0),
        )


def effective_weights(config: SimulatorConfig, history: Sequence[dict]) -> np.ndarray:
    w = np.array([ad.base_weight for ad in config.ad_pool], dtype=float)
    for e in config.effects:
        if e.trigger.matches(history):
            w[e.ad_index] *= e.weight_multiplier
    return w


def serve(
    config: SimulatorConfig, agent_history: Sequence[dict], reloads: int, rng: np.random.Generator
) -> list[AdRecord]:
    """Ads for ``reloads`` page loads.

    Each reload fills ``slots_per_reload`` distinct slots by successive
    weighted sampling without replacement (Gumbel top-k). Zero-weight ads
    are never served.
    """
    if len(config.ad_pool) < config.slots_per_reload:
        raise ValueError("ad pool smaller than slots_per_reload")
    w = effective_weights(config, agent_history)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    eligible = int(np.count_nonzero(w > 0))
    slots = min(config.slots_per_reload, eligible)
    ads = []
    for r in range(reloads):
        keys = logw + rng.gumbel(size=len(w))
        order = np.argsort(-keys, kind="stable")[:slots]
        for s, i in enumerate(order):
            ad = config.ad_pool[i]
            ads.append(AdRecord(ad.title, ad.url, ad.text, r, s))
    return ads


def settings_for(config: SimulatorConfig, agent_history: Sequence[dict]) -> set[str]:
    """Interests shown on the settings page for this history.

    Interests come from matching rules; ``remove_interest`` drops those
    containing its keyword and ``opt_out`` clears everything.
    """
    if any(a.get("kind") == "opt_out" for a in agent_history):
        return set()
    interests = {r.interest for r in config.settings_rules if r.pattern.matches(agent_history)}
    removed = [str(a.get("keyword", "")).lower() for a in agent_history if a.get("kind") == "remove_interest"]
    return {i for i in interests if not any(k and k in i.lower() for k in removed)}


class Simulator:
    """In-process SUT. Each agent's ads come from its own RNG stream."""

    def __init__(self, config: SimulatorConfig):
        self.config = config
        self._history: dict[int, list[dict]] = {}
        self._collects: dict[int, int] = {}
        self._lock = threading.Lock()

    def apply(self, agent: int, action: dict) -> None:
        with self._lock:
            self._history.setdefault(agent, []).append(dict(action))

    def history(self, agent: int) -> list[dict]:
        with self._lock:
            return list(self._history.get(agent, ()))

    def collect(self, agent: int, reloads: int) -> list[AdRecord]:
        with self._lock:
            call = self._collects.get(agent, 0)
            self._collects[agent] = call + 1
        rng = make_rng(self.config.seed, 1, agent, call)
        return serve(self.config, self.history(agent), reloads, rng)

    def settings(self, agent: int) -> set[str]:
        return settings_for(self.config, self.history(agent))


def handle_request(sut: Sut, request) -> dict:
    """One protocol request to one response, never raising."""
    if not isinstance(request, dict):
        return {"error": "request must be a JSON object"}
    op = request.get("op")
    try:
        if op == "apply":
            sut.apply(int(request["agent"]), dict(request["action"]))
            return {"ok": True}
        if op == "collect":
            ads = sut.collect(int(request["agent"]), int(request["reloads"]))
            return {"ads": [ad.to_json() for ad in ads]}
        if op == "settings":
            return {"settings": sorted(sut.settings(int(request["agent"])))}
    except (KeyError, TypeError, ValueError) as exc:
        return {"error": f"bad {op} request: {exc}"}
    return {"error": f"unknown op: {op!r}"}


def serve_stream(sut: Sut, reader: IO[str], writer: IO[str]) -> None:
    """Answer line-delimited JSON requests until EOF."""
    for line in reader:
        if not line.strip():
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            response = {"error": f"invalid JSON: {exc.msg}"}
        else:
            response = handle_request(sut, request)
        writer.write(json.dumps(response, separators=(",", ":")) + "\n")
        writer.flush()


class SimulatorServer(socketserver.ThreadingTCPServer):
    """TCP front end for a SUT; one protocol session per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, sut: Sut):
        self.sut = sut

        class Handler(socketserver.StreamRequestHandler):
            def handle(inner):
                reader = (ln.decode("utf-8") for ln in inner.rfile)
                writer = _SocketWriter(inner.wfile)
                serve_stream(self.sut, reader, writer)

        super().__init__(address, Handler)


class _SocketWriter:
    def __init__(self, wfile):
        self._w = wfile

    def write(self, s: str):
        self._w.write(s.encode("utf-8"))

    def flush(self):
        self._w.flush()


class TcpSut:
    """Client side of the SUT protocol over TCP."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("r", encoding="utf-8", newline="\n")
        self._wfile = self._sock.makefile("w", encoding="utf-8", newline="\n")
        self._lock = threading.Lock()

    @classmethod
    def from_spec(cls, spec: str) -> "TcpSut":
        _, host, port = spec.split(":", 2)
        return cls(host, int(port))

    def close(self):
        self._rfile.close()
        self._wfile.close()
        self._sock.close()

    def _call(self, request: dict) -> dict:
        with self._lock:
            self._wfile.write(json.dumps(request, separators=(",", ":")) + "\n")
            self._wfile.flush()
            line = self._rfile.readline()
        return parse_response(line)

    def apply(self, agent: int, action: dict) -> None:
        self._call({"op": "apply", "agent": agent, "action": action})

    def collect(self, agent: int, reloads: int) -> list[AdRecord]:
        resp = self._call({"op": "collect", "agent": agent, "reloads": reloads})
        try:
            return [AdRecord.from_json(a) for a in resp["ads"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SutProtocolError(f"bad collect response {resp!r}: {exc}") from None

    def settings(self, agent: int) -> set[str]:
        resp = self._call({"op": "settings", "agent": agent})
        if not isinstance(resp.get("settings"), list):
            raise SutProtocolError(f"bad settings response: {resp!r}")
        return set(resp["settings"])


def parse_response(line: str) -> dict:
    if not line:
        raise SutProtocolError("SUT closed the connection")
    try:
        resp = json.loads(line)
    except json.JSONDecodeError:
        raise SutProtocolError(f"malformed response line: {line.rstrip()!r}") from None
    if not isinstance(resp, dict):
        raise SutProtocolError(f"malformed response line: {line.rstrip()!r}")
    if "error" in resp:
        raise SutProtocolError(f"SUT error: {resp['error']}")
    return resp


# --- scenario catalogue ------------------------------------------------------

_PRODUCTS = [
    "shoes", "laptops", "flights", "hotels", "insurance", "mortgages", "watches", "phones",
    "furniture", "software", "cameras", "bicycles", "vitamins", "courses", "tickets",
    "jewelry", "perfume", "tires", "pianos", "tents",
]
_HOOKS = ["Best", "Cheap", "Discount", "Premium", "Top"]

WATERSHED = PoolAd("The Watershed Rehab", "www.thewatershed.com/Help",
                   "Drug and alcohol rehab center, call now", 12.0)
DATING_ADS = (
    PoolAd("Are You Single?", "www.zoosk.com/Dating", "Meet singles near you, free dating app", 2.0),
    PoolAd("Top 5 Online Dating Sites", "www.consumer-rankings.com/Dating", "Compare dating sites", 2.0),
    PoolAd("Why can't I find a date?", "www.gk2gk.com", "Romance and relationship advice", 2.0),
)
EXEC_JOBS = PoolAd("$200k+ Jobs - Execs Only", "careerchange.com", "Executive career coaching", 2.0)


def generic_pool(size: int = 100) -> tuple[PoolAd, ...]:
    pool = []
    for i in range(size):
        product = _PRODUCTS[i % len(_PRODUCTS)]
        hook = _HOOKS[(i // len(_PRODUCTS)) % len(_HOOKS)]
        pool.append(PoolAd(f"{hook} {product.title()} Deals", f"www.{product}{i}.com",
                           f"Shop {product} online today, {hook.lower()} prices", 1.0))
    return tuple(pool)


def _visit(url: str, negate: bool = False) -> ActionPattern:
    return ActionPattern("visit_url_list", url=url, negate=negate)


def scenario(name: str, seed: int = 0) -> SimulatorConfig:
    """Built-in configurations used by the experiments and tests.

    ``null`` has no effects; ``planted`` serves a rehab ad only to agents
    that visited its site and lists an interest for them; ``opacity`` is
    the same without the settings rule; ``dating`` dampens dating ads
    once the interest is removed; ``gender`` boosts an executive-jobs ad
    for agents set to male.
    """
    base = generic_pool()
    if name == "null":
        return SimulatorConfig(base, seed=seed)
    if name in ("planted", "opacity"):
        pool = base + (WATERSHED,)
        i = len(base)
        effects = (Effect(_visit("thewatershed.com", negate=True), i, 0.0),)
        rules = () if name == "opacity" else (SettingsRule(_visit("thewatershed.com"), "Substance Abuse"),)
        return SimulatorConfig(pool, effects, rules, seed=seed)
    if name == "dating":
        pool = base + DATING_ADS
        effects = tuple(
            Effect(ActionPattern("remove_interest", keyword="dating"), len(base) + j, 0.3)
            for j in range(len(DATING_ADS))
        )
        rules = (SettingsRule(_visit("dating"), "Dating & Personals"),)
        return SimulatorConfig(pool, effects, rules, seed=seed)
    if name == "gender":
        pool = base + (EXEC_JOBS,)
        effects = (Effect(ActionPattern("set_setting", key="gender", value="male"), len(base), 3.0),)
        rules = (
            SettingsRule(ActionPattern("set_setting", key="gender", value="male"), "Gender: Male"),
            SettingsRule(ActionPattern("set_setting", key="gender", value="female"), "Gender: Female"),
        )
        return SimulatorConfig(pool, effects, rules, seed=seed)
    raise ValueError(f"unknown simulator scenario: {name!r}")


SCENARIOS = ("null", "planted", "opacity", "dating", "gender")


def load_config(spec: str, seed: int, base_dir: Path | None = None) -> SimulatorConfig:
    """A scenario name, or a path to a JSON config (its ``seed`` defaults to ``seed``)."""
    if spec in SCENARIOS:
        return scenario(spec, seed)
    path = Path(spec)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    d = json.loads(path.read_text())
    d.setdefault("seed", seed)
    return SimulatorConfig.from_json(d)
