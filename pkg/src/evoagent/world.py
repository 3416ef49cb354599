"""Simulated environment: tools with seeded failures, peers, and a small text gridworld.

Failure draws come from a 64-bit linear congruential generator (Knuth's MMIX
constants)::

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2**64
    u      = (state >> 11) / 2**53          # uniform in [0, 1)
    fail   = u < p

Each tool has its own stream. Its initial state is the explicit per-tool seed
when given, otherwise ``rng_seed XOR fnv1a64(tool_name)``.
"""

from __future__ import annotations

import ast
import operator
import re
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

from .core import Outcome, OutcomeStatus, TaskSpec

LCG_A = 6364136223846793005
LCG_C = 1442695040888963407
MASK64 = (1 << 64) - 1
DEFAULT_DELEGATION_CAP = 2
RESERVED_NAMES = {"Generate", "FinalAnswer"}


class UnknownTool(KeyError):
    pass


class SchemaViolation(ValueError):
    pass


class UnknownPeer(KeyError):
    pass


class DepthExceeded(RuntimeError):
    pass


class ToolFailure(Exception):
    """Raised by handlers to report a tool error."""


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


class Lcg64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_unit(self) -> float:
        self.state = (LCG_A * self.state + LCG_C) & MASK64
        return (self.state >> 11) / float(1 << 53)


class FailureInjector:
    def __init__(self, probabilities: Mapping[str, float] | None = None, rng_seed: int = 0,
                 seeds: Mapping[str, int] | None = None):
        self.probabilities = dict(probabilities or {})
        for name, p in self.probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"failure probability for {name!r} must be in [0, 1]")
        self.rng_seed = rng_seed
        self._seeds = dict(seeds or {})
        self._streams: dict[str, Lcg64] = {}
        self.draw_log: list[bool] = []
        self.draw_tools: list[str] = []
        self._lock = threading.Lock()

    def stream_seed(self, tool: str) -> int:
        return self._seeds.get(tool, self.rng_seed ^ fnv1a64(tool))

    def draw(self, tool: str) -> bool:
        """True means this invocation fails."""
        with self._lock:
            stream = self._streams.get(tool)
            if stream is None:
                stream = self._streams[tool] = Lcg64(self.stream_seed(tool))
            failed = stream.next_unit() < self.probabilities.get(tool, 0.0)
            self.draw_log.append(failed)
            self.draw_tools.append(tool)
            return failed


# --- tools ------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    name: str
    description: str = ""
    required: bool = True


Handler = Callable[[Mapping[str, str], "World"], str]


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameter_schema: tuple[ParamSpec, ...]
    handler: Handler
    timeout_ticks: int = 10
    cost_ticks: int = 1

    def check(self, params: Mapping[str, str]) -> None:
        names = {p.name for p in self.parameter_schema}
        extra = set(params) - names
        if extra:
            raise SchemaViolation(f"{self.name}: unexpected parameter {sorted(extra)[0]!r}")
        for p in self.parameter_schema:
            if p.required and not params.get(p.name):
                raise SchemaViolation(f"{self.name}: missing required parameter {p.name!r}")


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
           ast.FloorDiv: operator.floordiv, ast.Mod: operator.mod, ast.Pow: operator.pow}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def _arith(node: ast.AST) -> float:
    if isinstance(node, ast.Expression):
        return _arith(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        left, right = _arith(node.left), _arith(node.right)
        if isinstance(node.op, ast.Pow) and abs(right) > 64:
            raise ToolFailure("exponent too large")
        return _BINOPS[type(node.op)](left, right)
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
        return _UNOPS[type(node.op)](_arith(node.operand))
    raise ToolFailure("unsupported expression")


def calculator(params: Mapping[str, str], world: "World") -> str:
    expr = params["expression"]
    try:
        value = _arith(ast.parse(expr, mode="eval"))
    except SyntaxError:
        raise ToolFailure(f"cannot parse expression {expr!r}") from None
    except ZeroDivisionError:
        raise ToolFailure("division by zero") from None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    return str(value)


def normalize_query(text: str) -> str:
    return " ".join(text.casefold().split()).rstrip("?.! ")


def lookup_handler(table: Mapping[str, str]) -> Handler:
    index = {normalize_query(k): v for k, v in table.items()}

    def search(params: Mapping[str, str], world: "World") -> str:
        hit = index.get(normalize_query(params["query"]))
        if hit is None:
            raise ToolFailure(f"no results for {params['query']!r}")
        return hit

    return search


def extract(params: Mapping[str, str], world: "World") -> str:
    try:
        m = re.search(params["pattern"], params["text"])
    except re.error:
        raise ToolFailure(f"bad pattern {params['pattern']!r}") from None
    if not m:
        raise ToolFailure("no match")
    return m.group(1) if m.groups() else m.group(0)


_FILLER = ("the sensor log continues with routine calibration notes about ambient drift humidity "
           "cycles maintenance windows operator remarks archived values and cross references to "
           "earlier batches none of which change the headline figure").split()


def reading_value(key: str) -> int:
    return 1000 + fnv1a64(key) % 9000


def reading(params: Mapping[str, str], world: "World", words: int = 180) -> str:
    """A long synthetic document whose first sentence carries the value for ``key``."""
    key = params["key"].strip()
    rng = Lcg64(fnv1a64(key))
    filler = " ".join(_FILLER[int(rng.next_unit() * len(_FILLER))] for _ in range(words))
    return f"reading {key}: {reading_value(key)} units. {filler}."



BUILTIN_SCHEMAS: dict[str, tuple[ParamSpec, ...]] = {
    "calculator": (ParamSpec("expression", "arithmetic expression"),),
    "lookup": (ParamSpec("query", "search query"),),
    "extract": (ParamSpec("text", "text to search"), ParamSpec("pattern", "regular expression")),
    "reading": (ParamSpec("key", "reading identifier"),),
    "go": (ParamSpec("room", "room to move to"),),
    "look": (),
    "take": (ParamSpec("object", "object to pick up"),),
    "put": (ParamSpec("object", "held object"), ParamSpec("room", "current room")),
}


# --- mini environment -------------------------------------------------------


@dataclass(frozen=True)
class MiniEnv:
    rooms: tuple[str, ...]
    doors: Mapping[str, tuple[str, ...]]
    placement: Mapping[str, str]  # object -> room, or "held"
    location: str
    goal: tuple[str, str]  # (object, room)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MiniEnv":
        rooms = tuple(sorted(d["rooms"]))
        doors: dict[str, set[str]] = {r: set() for r in rooms}
        for a, b in d.get("connections", []):
            if a not in doors or b not in doors:
                raise ValueError(f"connection {a}-{b} names an unknown room")
            doors[a].add(b)
            doors[b].add(a)
        placement = dict(d.get("objects", {}))
        for obj, room in placement.items():
            if room not in doors:
                raise ValueError(f"object {obj!r} placed in unknown room {room!r}")
        if d["start"] not in doors:
            raise ValueError(f"unknown start room {d['start']!r}")
        goal = (d["goal"]["object"], d["goal"]["room"])
        return cls(rooms, {r: tuple(sorted(v)) for r, v in doors.items()}, placement, d["start"], goal)

    def to_dict(self) -> dict:
        conns = sorted({tuple(sorted((a, b))) for a, bs in self.doors.items() for b in bs})
        return {"rooms": list(self.rooms), "connections": [list(c) for c in conns],
                "objects": dict(sorted(self.placement.items())), "start": self.location,
                "goal": {"object": self.goal[0], "room": self.goal[1]}}

    @property
    def goal_reached(self) -> bool:
        obj, room = self.goal
        return self.placement.get(obj) == room

    def here(self) -> list[str]:
        return sorted(o for o, r in self.placement.items() if r == self.location)

    def held(self) -> list[str]:
        return sorted(o for o, r in self.placement.items() if r == "held")


def _describe(env: MiniEnv) -> str:
    things = ", ".join(env.here()) or "nothing"
    text = f"you are in the {env.location}. exits: {', '.join(env.doors[env.location]) or 'none'}. you see: {things}."
    if env.held():
        text += f" you hold: {', '.join(env.held())}."
    if env.goal_reached:
        text += " goal reached."
    return text


def mini_env_step(env: MiniEnv, affordance: str, args: Mapping[str, str] | None = None) -> tuple[MiniEnv, str]:
    """Apply one affordance; invalid moves leave the state unchanged and say why."""
    args = dict(args or {})
    if affordance == "look":
        return env, _describe(env)
    if affordance == "go":
        room = args.get("room", "")
        if room not in env.doors:
            return env, f"invalid move: there is no room called {room!r}."
        if room != env.location and room not in env.doors[env.location]:
            return env, f"invalid move: the {room} is not reachable from the {env.location}."
        new = replace(env, location=room)
        return new, f"you go to the {room}. " + _describe(new)
    if affordance == "take":
        obj = args.get("object", "")
        if env.placement.get(obj) != env.location:
            return env, f"invalid move: there is no {obj} here."
        new = replace(env, placement={**env.placement, obj: "held"})
        return new, f"you take the {obj}. " + _describe(new)
    if affordance == "put":
        obj, room = args.get("object", ""), args.get("room", "")
        if env.placement.get(obj) != "held":
            return env, f"invalid move: you are not holding the {obj}."
        if room != env.location:
            return env, f"invalid move: you are in the {env.location}, not the {room}."
        new = replace(env, placement={**env.placement, obj: room})
        return new, f"you put the {obj} in the {room}. " + _describe(new)
    return env, f"invalid move: unknown affordance {affordance!r}."


def affordance_handler(name: str) -> Handler:
    def handle(params: Mapping[str, str], world: "World") -> str:
        if world.env is None:
            raise ToolFailure("no environment loaded")
        world.env, obs = mini_env_step(world.env, name, params)
        return obs

    return handle


def replay_affordances(env: MiniEnv, calls) -> MiniEnv:
    """Re-apply ``(affordance, params)`` calls; used to check final states."""
    for name, params in calls:
        env, _ = mini_env_step(env, name, params)
    return env


# --- peers ------------------------------------------------------------------

# (task, depth) -> the peer agent's finished trajectory
PeerAgent = Callable[[TaskSpec, int], Any]


@dataclass
class PeerSpec:
    peer_id: str
    expertise_tags: tuple[str, ...] = ()
    table: Mapping[str, str] | None = None
    agent: PeerAgent | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if (self.table is None) == (self.agent is None):
            raise ValueError(f"peer {self.peer_id!r} needs exactly one of a table or an agent")
        if self.table is not None:
            self.table = {normalize_query(k): v for k, v in self.table.items()}


# --- the world --------------------------------------------------------------


@dataclass
class World:
    tools: dict[str, ToolSpec] = field(default_factory=dict)
    injector: FailureInjector = field(default_factory=FailureInjector)
    peers: dict[str, PeerSpec] = field(default_factory=dict)
    env: MiniEnv | None = None
    delegation_cap: int = DEFAULT_DELEGATION_CAP
    clock: int = 0
    delegations: list[Any] = field(default_factory=list)

    def add_tool(self, spec: ToolSpec) -> None:
        if spec.name in self.tools or spec.name in RESERVED_NAMES or spec.name in self.peers:
            raise ValueError(f"tool name {spec.name!r} is taken")
        self.tools[spec.name] = spec

    def add_peer(self, spec: PeerSpec) -> None:
        if spec.peer_id in self.peers or spec.peer_id in self.tools:
            raise ValueError(f"peer id {spec.peer_id!r} is taken")
        self.peers[spec.peer_id] = spec

    def invoke_tool(self, name: str, parameters: Mapping[str, str]) -> Outcome:
        spec = self.tools.get(name)
        if spec is None:
            raise UnknownTool(name)
        spec.check(parameters)
        if self.injector.draw(name):
            self.clock += 1
            return Outcome.error(OutcomeStatus.TOOL_ERROR, "injected failure")
        if spec.cost_ticks > spec.timeout_ticks:
            self.clock += spec.timeout_ticks
            return Outcome.error(OutcomeStatus.TIMEOUT, f"{name} did not finish within {spec.timeout_ticks} ticks")
        self.clock += spec.cost_ticks
        try:
            payload = spec.handler(parameters, self)
        except ToolFailure as exc:
            return Outcome.error(OutcomeStatus.TOOL_ERROR, str(exc) or "tool failed")
        return Outcome.success(payload or "(empty result)")

    def route_etic(self, kind: str, peer_id: str, payload: str, depth: int = 0, task_id: str = "task") -> Outcome:
        """``kind`` is "ask" or "delegate"; ``depth`` is the caller's delegation depth."""
        if kind not in ("ask", "delegate"):
            raise ValueError(f"unknown etic kind {kind!r}")
        peer = self.peers.get(peer_id)
        if peer is None:
            raise UnknownPeer(peer_id)
        self.clock += 1
        with peer._lock:
            if peer.table is not None:
                answer = peer.table.get(normalize_query(payload), "I don't know.")
                return Outcome(OutcomeStatus.PEER_RESPONSE, answer)
            if depth >= self.delegation_cap:
                raise DepthExceeded(f"delegation depth {depth} reached cap {self.delegation_cap}")
            sub = TaskSpec(f"{task_id}>{peer_id}#{len(self.delegations)}", payload, frozenset(peer.expertise_tags))
            traj = peer.agent(sub, depth + 1)
            self.delegations.append(traj)
        if getattr(traj, "final_status", None) is not None and traj.final_status.value == "Solved" and traj.final_answer:
            return Outcome(OutcomeStatus.PEER_RESPONSE, traj.final_answer)
        return Outcome(OutcomeStatus.CAP_EXCEEDED, "")


def invoke_tool(world: World, name: str, parameters: Mapping[str, str]) -> Outcome:
    return world.invoke_tool(name, parameters)


def route_etic(world: World, kind: str, peer_id: str, payload: str, depth: int = 0) -> Outcome:
    return world.route_etic(kind, peer_id, payload, depth)


def _schema(spec: Any) -> tuple[ParamSpec, ...]:
    return tuple(ParamSpec(p["name"], p.get("description", ""), bool(p.get("required", True))) for p in spec)


def tool_from_dict(d: Mapping) -> ToolSpec:
    """Build a tool from a scenario entry; ``handler`` names a builtin."""
    kind = d.get("handler", d["name"])
    if kind == "lookup":
        handler = lookup_handler(d.get("table") or {})
    elif kind in ("go", "look", "take", "put"):
        handler = affordance_handler(kind)
    elif kind in ("calculator", "extract", "reading"):
        handler = {"calculator": calculator, "extract": extract, "reading": reading}[kind]
    else:
        raise ValueError(f"unknown tool handler {kind!r}")
    schema = _schema(d["parameters"]) if "parameters" in d else BUILTIN_SCHEMAS[kind]
    return ToolSpec(d["name"], d["description"], schema, handler,
                    int(d.get("timeout_ticks", 10)), int(d.get("cost_ticks", 1)))


def world_from_scenario(scenario: Mapping, task_seed: int, peer_agents: Mapping[str, PeerAgent] | None = None,
                        delegation_cap: int = DEFAULT_DELEGATION_CAP) -> World:
    """Fresh world for one task; failure streams derive from ``task_seed``."""
    tools = [tool_from_dict(t) for t in scenario.get("tools", [])]
    probs = {t["name"]: float(t.get("failure_probability", 0.0)) for t in scenario.get("tools", [])}
    seeds = {t["name"]: fnv1a64(f"{t['failure_seed']}:{task_seed}")
             for t in scenario.get("tools", []) if "failure_seed" in t}
    world = World(injector=FailureInjector(probs, task_seed, seeds), delegation_cap=delegation_cap)
    for t in tools:
        world.add_tool(t)
    for p in scenario.get("peers", []):
        agent = (peer_agents or {}).get(p["peer_id"]) if "agent" in p else None
        world.add_peer(PeerSpec(p["peer_id"], tuple(sorted(p.get("expertise", {}))),
                                table=p.get("table") if "agent" not in p else None, agent=agent))
    if scenario.get("env"):
        world.env = MiniEnv.from_dict(scenario["env"])
    return world
