"""Builders shared by the test modules."""

from __future__ import annotations

from evoagent.backend import ScriptedBackend, ScriptedScenario
from evoagent.cognition import CognitionStore, seed_state
from evoagent.core import (
    ActionKind,
    ActionRecord,
    ActionVariant,
    FinalStatus,
    Outcome,
    OutcomeStatus,
    TaskSpec,
    Trajectory,
)
from evoagent.decision import Agent, RunConfig
from evoagent.world import World, tool_from_dict

MEMORY_POLICIES = {"compress": "extractive", "selector": "recent_raw", "fold": "digest", "generate": "echo"}


def sel(action: str, intention: str = "do it", **params: str) -> str:
    args = "; ".join(f"{k}={v}" for k, v in params.items())
    return f"ACTION: {action}; PARAMS: {args}; INTENTION: {intention}"


def tool_kind(name: str) -> ActionKind:
    return ActionKind(ActionVariant.EMIC_TOOL_CALL, name)


def record(i: int, name: str = "lookup", payload: str = "result", status: OutcomeStatus = OutcomeStatus.SUCCESS,
           params: dict | None = None, intention: str = "try", kind: ActionKind | None = None) -> ActionRecord:
    if status in (OutcomeStatus.TOOL_ERROR, OutcomeStatus.PARSE_ERROR, OutcomeStatus.TIMEOUT):
        outcome = Outcome(status, f"error: {payload}", payload)
    else:
        outcome = Outcome(status, payload)
    return ActionRecord(i, intention, kind or tool_kind(name), params or {}, outcome, i, i + 1)


def trajectory(task_id: str, records, status=FinalStatus.SOLVED, answer="x", tags=(), gold=None) -> Trajectory:
    return Trajectory(TaskSpec(task_id, f"task {task_id}", frozenset(tags), gold_answer=gold), tuple(records),
                      status, answer)


def scripted(select_entries=(), policies=None, **extra) -> ScriptedBackend:
    spec = {"entries": {"select": list(select_entries)}, "policies": dict(policies or MEMORY_POLICIES), **extra}
    return ScriptedBackend(ScriptedScenario.from_dict(spec))


def lookup_world(table=None, extra_tools=()) -> World:
    world = World()
    world.add_tool(tool_from_dict({"name": "lookup", "description": "search", "table": table or {"q": "answer"}}))
    for spec in extra_tools:
        world.add_tool(tool_from_dict(spec))
    return world


def store_for(world: World, peers=()) -> CognitionStore:
    tools = [{"name": t.name, "description": t.description} for t in world.tools.values()]
    return CognitionStore(seed_state(tools=tools, peers=peers))


def agent(world: World, backend, **config) -> Agent:
    return Agent(store_for(world), world, backend, RunConfig(**config))
