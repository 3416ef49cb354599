"""Select-Execute-Update: the per-step decision loop over the unified action space."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Iterable, Mapping

from .backend import Backend, BackendError, CompletionRequest, UsageMeter
from .cognition import (
    CognitionState,
    CognitionStore,
    PlanStep,
    plan_flow_problems,
    render_knowledge,
)
from .core import (
    VARIANT_ORDER,
    ActionKind,
    ActionRecord,
    ActionVariant,
    FinalStatus,
    Outcome,
    OutcomeStatus,
    TaskSpec,
    Trajectory,
    append_record,
    finish,
)
from .emo import (
    DEFAULT_FOLD_THRESHOLD,
    BudgetTooSmall,
    MemoryPool,
    WorkingMemory,
    assemble_full_raw,
    assemble_working_memory,
    auto_fold_range,
    ingest_step,
    mem_fold,
    select_representations,
)
from .world import DepthExceeded, ParamSpec, SchemaViolation, UnknownPeer, UnknownTool, World

log = logging.getLogger(__name__)

GENERATE = "Generate"
FINAL_ANSWER = "FinalAnswer"
MAX_PLAN_NESTING = 4

_FIXED_SCHEMAS = {
    ActionVariant.EMIC_GENERATE: (ParamSpec("prompt", "what to generate"),),
    ActionVariant.FINAL_ANSWER: (ParamSpec("answer", "the final answer to the task"),),
    ActionVariant.ETIC_ASK: (ParamSpec("question", "question for the peer"),),
    ActionVariant.ETIC_DELEGATE: (ParamSpec("task", "sub-task handed to the peer"),),
}
_FIXED_KNOWLEDGE = {
    ActionVariant.EMIC_GENERATE: "produce text yourself: reasoning, drafts or summaries",
    ActionVariant.FINAL_ANSWER: "finish the task with the given answer",
}


@dataclass(frozen=True)
class RunConfig:
    max_steps: int = 5
    embodied_max_steps: int = 50
    max_generation_tokens: int = 1024
    temperature: float = 0.7
    memory_budget: int = 2048
    seed: int = 0
    emo: bool = True
    fold_threshold: int = DEFAULT_FOLD_THRESHOLD
    delegation_cap: int = 2

    def __post_init__(self):
        if self.max_steps < 1 or self.embodied_max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_generation_tokens < 1:
            raise ValueError("max_generation_tokens must be >= 1")
        if self.memory_budget < 1:
            raise ValueError("memory_budget must be >= 1")

    def step_cap(self, task: TaskSpec) -> int:
        return self.embodied_max_steps if task.embodied else self.max_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class ActionDescriptor:
    kind: ActionKind
    name: str
    rendered_knowledge: str
    parameter_schema: tuple[ParamSpec, ...]
    version: int


@dataclass(frozen=True)
class Selection:
    chosen: ActionDescriptor
    parameters: Mapping[str, str]
    intention: str


class ParseError(ValueError):
    pass


class UnknownActionName(ParseError):
    pass


class MissingRequiredParam(ParseError):
    pass


# --- action space -----------------------------------------------------------


def _descriptor(kind: ActionKind, knowledge: str, schema, version: int) -> ActionDescriptor:
    return ActionDescriptor(kind, kind.name, knowledge, tuple(schema), version)


def build_action_space(state: CognitionState, world: World, domain_tags: Iterable[str] = ()) -> list[ActionDescriptor]:
    """Every action available this step, in fixed kind order then name order."""
    tags = sorted(domain_tags)
    v = state.version
    space = [_descriptor(ActionKind(ActionVariant.EMIC_GENERATE), _FIXED_KNOWLEDGE[ActionVariant.EMIC_GENERATE],
                         _FIXED_SCHEMAS[ActionVariant.EMIC_GENERATE], v)]
    for name in sorted(world.tools):
        space.append(_descriptor(ActionKind(ActionVariant.EMIC_TOOL_CALL, name), render_knowledge(state, name, tags),
                                 world.tools[name].parameter_schema, v))
    for sid in sorted(state.skills):
        skill = state.skills[sid]
        space.append(_descriptor(ActionKind(ActionVariant.EMIC_SKILL_INVOKE, sid), render_knowledge(state, sid, tags),
                                 [ParamSpec(p) for p in skill.parameters], v))
    for cid in sorted(state.composites):
        comp = state.composites[cid]
        space.append(_descriptor(ActionKind(ActionVariant.EMIC_COMPOSITE_INVOKE, cid),
                                 render_knowledge(state, cid, tags), [ParamSpec(p) for p in comp.parameters], v))
    for variant in (ActionVariant.ETIC_ASK, ActionVariant.ETIC_DELEGATE):
        for pid in sorted(world.peers):
            knowledge = render_knowledge(state, pid, tags) if pid in state.peers else "expertise: unknown"
            space.append(_descriptor(ActionKind(variant, pid), knowledge, _FIXED_SCHEMAS[variant], v))
    space.append(_descriptor(ActionKind(ActionVariant.FINAL_ANSWER), _FIXED_KNOWLEDGE[ActionVariant.FINAL_ANSWER],
                             _FIXED_SCHEMAS[ActionVariant.FINAL_ANSWER], v))
    order = {variant: i for i, variant in enumerate(VARIANT_ORDER)}
    space.sort(key=lambda d: (order[d.kind.variant], d.name))
    return space


# --- prompt and parsing -----------------------------------------------------

SELECT_SYSTEM = "You are an autonomous agent. Pick the single most suitable next action."
OUTPUT_GRAMMAR = "ACTION: <name>; PARAMS: <name=value; ...>; INTENTION: <one line>"


def _schema_line(schema: Iterable[ParamSpec]) -> str:
    parts = [f"{p.name} ({'required' if p.required else 'optional'})" + (f": {p.description}" if p.description else "")
             for p in schema]
    return "parameters: " + ("; ".join(parts) if parts else "none")


def render_select_prompt(task: TaskSpec, working_memory: WorkingMemory, action_space: list[ActionDescriptor]) -> str:
    lines = ["# Task", task.instruction]
    if task.domain_tags:
        lines.append("tags: " + ", ".join(sorted(task.domain_tags)))
    lines += ["", "# Working memory", working_memory.render(), "", "# Actions"]
    for d in action_space:
        lines.append(f"## {d.name} [{d.kind.variant.value}]")
        lines.append(d.rendered_knowledge)
        lines.append(_schema_line(d.parameter_schema))
    lines += ["", "# Output", "Reply with exactly one line:", OUTPUT_GRAMMAR]
    return "\n".join(lines)


_SELECTION_RE = re.compile(
    r"ACTION:[ \t]*(?P<name>[^;\n]*?)[ \t]*;[ \t]*PARAMS:(?P<params>[^\n]*?);[ \t]*INTENTION:[ \t]*(?P<intention>[^\n]*?)[ \t]*"
)
_PARAM_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*")


def _parse_params(text: str) -> dict[str, str]:
    text = text.strip()
    if text in ("", "-", "none"):
        return {}
    params: dict[str, str] = {}
    for piece in text.split(";"):
        if not piece.strip():
            continue
        if "=" not in piece:
            raise ParseError(f"parameter {piece.strip()!r} is not name=value")
        name, value = piece.split("=", 1)
        name = name.strip()
        if not _PARAM_NAME.fullmatch(name):
            raise ParseError(f"bad parameter name {name!r}")
        if name in params:
            raise ParseError(f"parameter {name!r} given twice")
        params[name] = value.strip()
    return params


def parse_selection(raw_output: str | bytes, action_space: list[ActionDescriptor]) -> Selection:
    """Strict parse of the one-line selection grammar; raises ParseError (or a subclass)."""
    if isinstance(raw_output, bytes):
        raw_output = raw_output.decode("utf-8", errors="replace")
    candidates = [ln.strip() for ln in raw_output.splitlines() if ln.strip().startswith("ACTION:")]
    if not candidates:
        raise ParseError("no line starting with 'ACTION:'")
    m = _SELECTION_RE.fullmatch(candidates[-1])
    if not m:
        raise ParseError(f"selection does not match {OUTPUT_GRAMMAR!r}")
    name = m.group("name")
    params = _parse_params(m.group("params"))
    intention = m.group("intention").strip()
    if not intention:
        raise ParseError("empty INTENTION")

    chosen = next((d for d in action_space if d.name == name), None)
    if chosen is None:
        raise UnknownActionName(f"no action named {name!r}")
    allowed = {p.name for p in chosen.parameter_schema}
    extra = set(params) - allowed
    if extra:
        raise ParseError(f"{name} takes no parameter {sorted(extra)[0]!r}")
    for p in chosen.parameter_schema:
        if p.required and not params.get(p.name):
            raise MissingRequiredParam(f"{name} needs parameter {p.name!r}")
    return Selection(chosen, params, intention)


# --- execution --------------------------------------------------------------


@dataclass
class ExecContext:
    world: World
    backend: Backend
    state: CognitionState
    config: RunConfig
    depth: int = 0
    task_id: str = "task"


def _run_plan(label: str, steps: tuple[PlanStep, ...], inputs: Mapping[str, str], declared, ctx: ExecContext,
              nesting: int) -> Outcome:
    problems = plan_flow_problems(steps, declared)
    if problems:
        return Outcome.error(OutcomeStatus.TOOL_ERROR, f"{label}: {problems[0]}")
    payloads: list[str] = []
    for i, step in enumerate(steps):
        args = {}
        for name, b in step.bindings:
            if b.source == "output":
                args[name] = payloads[b.value]
            elif b.source == "param":
                args[name] = inputs[b.value]
            else:
                args[name] = str(b.value)
        out = _execute_kind(step.kind, args, ctx, nesting + 1)
        if out.status not in (OutcomeStatus.SUCCESS, OutcomeStatus.PEER_RESPONSE):
            detail = out.error_detail or out.status.value
            return Outcome.error(OutcomeStatus.TOOL_ERROR,
                                 f"{label} failed at sub-step {i} ({step.kind.name}): {detail}")
        payloads.append(out.payload)
    return Outcome.success(payloads[-1])


class _Placeholders(dict):
    def __init__(self, values: Mapping[str, str]):
        super().__init__(values)

    def __missing__(self, key):
        return "{" + key + "}"


def _execute_kind(kind: ActionKind, params: Mapping[str, str], ctx: ExecContext, nesting: int = 0) -> Outcome:
    v = kind.variant
    if nesting > MAX_PLAN_NESTING:
        return Outcome(OutcomeStatus.CAP_EXCEEDED, "plan nesting too deep")
    if v is ActionVariant.FINAL_ANSWER:
        return Outcome.success(params["answer"])
    if v is ActionVariant.EMIC_GENERATE:
        req = CompletionRequest("generate", (("system", "Respond to the request."), ("user", params["prompt"])),
                                ctx.config.max_generation_tokens, ctx.config.temperature)
        try:
            text = ctx.backend.complete(req).text
        except BackendError as exc:
            return Outcome.error(OutcomeStatus.TOOL_ERROR, f"generation failed: {exc}")
        return Outcome.success(text or "(empty generation)")
    if v is ActionVariant.EMIC_TOOL_CALL:
        try:
            return ctx.world.invoke_tool(kind.target, params)
        except (UnknownTool, SchemaViolation) as exc:
            return Outcome.error(OutcomeStatus.TOOL_ERROR, str(exc))
    if v.is_etic:
        mode = "ask" if v is ActionVariant.ETIC_ASK else "delegate"
        text = params["question"] if mode == "ask" else params["task"]
        try:
            return ctx.world.route_etic(mode, kind.target, text, ctx.depth, ctx.task_id)
        except UnknownPeer as exc:
            return Outcome.error(OutcomeStatus.TOOL_ERROR, f"unknown peer {exc}")
        except DepthExceeded as exc:
            return Outcome(OutcomeStatus.CAP_EXCEEDED, str(exc))
    if v is ActionVariant.EMIC_SKILL_INVOKE:
        skill = ctx.state.skills.get(kind.target)
        if skill is None:
            return Outcome.error(OutcomeStatus.TOOL_ERROR, f"unknown skill {kind.target!r}")
        if skill.template:
            prompt = skill.template.format_map(_Placeholders(params))
            return _execute_kind(ActionKind(ActionVariant.EMIC_GENERATE), {"prompt": prompt}, ctx, nesting + 1)
        return _run_plan(f"skill {skill.skill_id}", skill.steps, params, skill.parameters, ctx, nesting)
    if v is ActionVariant.EMIC_COMPOSITE_INVOKE:
        comp = ctx.state.composites.get(kind.target)
        if comp is None:
            return Outcome.error(OutcomeStatus.TOOL_ERROR, f"unknown composite {kind.target!r}")
        return _run_plan(f"composite {comp.composite_id}", comp.steps, params, comp.parameters, ctx, nesting)
    raise AssertionError(v)


def execute(selection: Selection, world: World, backend: Backend, cognition: CognitionState,
            config: RunConfig | None = None, depth: int = 0, task_id: str = "task") -> tuple[Outcome, bool]:
    """Run the selected action; the flag is True when the loop should stop."""
    ctx = ExecContext(world, backend, cognition, config or RunConfig(), depth, task_id)
    outcome = _execute_kind(selection.chosen.kind, selection.parameters, ctx)
    return outcome, selection.chosen.kind.variant is ActionVariant.FINAL_ANSWER


# --- the loop ---------------------------------------------------------------


@dataclass
class Agent:
    """One agent: its cognition, world, backend and configuration."""

    store: CognitionStore
    world: World
    backend: Backend
    config: RunConfig = field(default_factory=RunConfig)
    depth: int = 0
    config_snapshot: Mapping[str, Any] | None = None
    trace: Callable[[str], None] | None = None
    on_update: Callable[[TaskSpec, ActionRecord], None] | None = None

    # filled by run()
    pool: MemoryPool = field(default_factory=MemoryPool, init=False)
    meter: UsageMeter | None = field(default=None, init=False)
    pinned_versions: list[int] = field(default_factory=list, init=False)
    degraded_steps: int = field(default=0, init=False)
    last_working_memory: WorkingMemory | None = field(default=None, init=False)

    def _emit(self, line: str) -> None:
        if self.trace is not None:
            self.trace(line)

    def _working_memory(self, task: TaskSpec, meter: Backend) -> WorkingMemory:
        pool, cfg = self.pool, self.config
        if not cfg.emo:
            return assemble_full_raw(pool)
        if not pool.steps:
            return WorkingMemory((), 0, cfg.memory_budget)
        auto = auto_fold_range(pool, cfg.fold_threshold)
        if auto is not None:
            mem_fold(pool, *auto, meter)
        decision = select_representations(pool, task.instruction, meter)
        if decision.fold_directive is not None:
            mem_fold(pool, *decision.fold_directive, meter)
            decision = decision.restricted_to(pool.unfolded())
        wm = assemble_working_memory(pool, decision, cfg.memory_budget)
        self.degraded_steps += wm.degraded
        return wm

    def _select(self, meter: Backend, prompt: str, space: list[ActionDescriptor]) -> tuple[Selection | None, str]:
        def ask(text: str) -> str:
            req = CompletionRequest("select", (("system", SELECT_SYSTEM), ("user", text)),
                                    self.config.max_generation_tokens, self.config.temperature)
            return meter.complete(req).text

        try:
            raw = ask(prompt)
        except BackendError as exc:
            return None, f"backend error: {exc}"
        try:
            return parse_selection(raw, space), ""
        except ParseError as exc:
            first = exc
        repair = (f"{prompt}\n\nYour previous reply could not be used ({first}).\n"
                  f"Previous reply: {raw.strip()[:500]}\nReply again with exactly one line:\n{OUTPUT_GRAMMAR}")
        try:
            raw = ask(repair)
        except BackendError as exc:
            return None, f"{first}; repair failed: backend error: {exc}"
        try:
            return parse_selection(raw, space), ""
        except ParseError as exc:
            return None, f"{first}; after repair: {exc}"

    def run(self, task: TaskSpec) -> Trajectory:
        cfg = self.config
        self.pool = MemoryPool()
        self.meter = meter = UsageMeter(self.backend)
        self.pinned_versions = []
        self.degraded_steps = 0
        compressor = meter if cfg.emo else None
        snapshot = dict(self.config_snapshot) if self.config_snapshot is not None else {"run": cfg.to_dict()}
        traj = Trajectory(task, config_snapshot=snapshot)
        clock = 0
        status = FinalStatus.CAP_HIT
        answer = None

        for step in range(cfg.step_cap(task)):
            state = self.store.pin()
            space = build_action_space(state, self.world, task.domain_tags)
            self.pinned_versions.append(state.version)
            assert all(d.version == state.version for d in space)
            try:
                wm = self._working_memory(task, meter)
            except BudgetTooSmall as exc:
                log.warning("task %s stopped at step %d: %s", task.task_id, step, exc)
                status = FinalStatus.FAILED
                break
            self.last_working_memory = wm
            prompt = render_select_prompt(task, wm, space)

            start = clock
            selection, problem = self._select(meter, prompt, space)
            clock += 1
            done = False
            if selection is None:
                kind, params, intention = ActionKind(ActionVariant.EMIC_GENERATE), {}, "(unparsable selection)"
                outcome = Outcome.error(OutcomeStatus.PARSE_ERROR, problem)
                self._emit(f"SELECT step={step} parse_error")
            else:
                kind, params, intention = selection.chosen.kind, dict(selection.parameters), selection.intention
                self._emit(f"SELECT step={step} action={kind.name}")
                before = self.world.clock
                outcome, done = execute(selection, self.world, meter, state, cfg, self.depth, task.task_id)
                clock += max(1, self.world.clock - before)
            self._emit(f"EXECUTE step={step} status={outcome.status.value}")

            record = ActionRecord(step, intention, kind, params, outcome, start, clock)
            traj = append_record(traj, record)
            ingest_step(self.pool, record, compressor)
            if self.on_update is not None:
                self.on_update(task, record)
            self._emit(f"UPDATE step={step} memory_steps={len(self.pool)}")
            if done:
                status, answer = FinalStatus.SOLVED, outcome.payload
                break

        return finish(traj, status, answer, meter.totals())


def run_seu_loop(task: TaskSpec, config: RunConfig, components: Mapping[str, Any]) -> Trajectory:
    """Functional entry point; ``components`` holds ``store``, ``world`` and ``backend``."""
    agent = Agent(components["store"], components["world"], components["backend"], config,
                  depth=components.get("depth", 0), trace=components.get("trace"),
                  on_update=components.get("on_update"))
    return agent.run(task)
