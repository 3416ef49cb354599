"""The evolvable knowledge base.

The store is an append-only log of committed revisions over a seed state; the
current state is a materialized view. ``replay()`` folds the log over the seed
and must reproduce the live state byte-for-byte.
"""

from __future__ import annotations

import copy
import hashlib
import string
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import (
    FORMAT_VERSION,
    ActionKind,
    ActionVariant,
    FormatVersionMismatch,
    MalformedLine,
    Outcome,
    OutcomeStatus,
    dumps_line,
    read_jsonl,
    write_jsonl,
)

TOP_K_FAILURES = 3
MAX_EXAMPLES = 5
NO_TAG = "general"


class UnknownAction(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unknown action {self.name!r}"


class NotValidated(ValueError):
    pass


def estimate(successes: int, attempts: int) -> float:
    """Laplace-smoothed success rate."""
    return (successes + 1) / (attempts + 2)


# --- plans shared by skills and composites ----------------------------------


@dataclass(frozen=True)
class Binding:
    """Where a step parameter comes from: a literal, ``output[j]`` or a declared input."""

    source: str  # "literal" | "output" | "param"
    value: Any

    def __post_init__(self):
        if self.source not in ("literal", "output", "param"):
            raise ValueError(f"bad binding source {self.source!r}")
        if self.source == "output" and (not isinstance(self.value, int) or self.value < 0):
            raise ValueError("output binding needs a step index")

    def render(self) -> str:
        if self.source == "output":
            return f"output[{self.value}]"
        if self.source == "param":
            return "{" + self.value + "}"
        return repr(self.value)

    def to_dict(self) -> dict:
        return {self.source: self.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Binding":
        ((source, value),) = d.items()
        return cls(source, value)


def literal(v: str) -> Binding:
    return Binding("literal", v)


def output(j: int) -> Binding:
    return Binding("output", j)


def param(name: str) -> Binding:
    return Binding("param", name)


@dataclass(frozen=True)
class PlanStep:
    kind: ActionKind
    bindings: tuple[tuple[str, Binding], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bindings", tuple((k, b) for k, b in self.bindings))

    def render(self) -> str:
        args = ", ".join(f"{k}={b.render()}" for k, b in self.bindings)
        return f"{self.kind.name}({args})"

    def to_dict(self) -> dict:
        return {"kind": self.kind.to_dict(), "bindings": [[k, b.to_dict()] for k, b in self.bindings]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlanStep":
        return cls(ActionKind.from_dict(d["kind"]), tuple((k, Binding.from_dict(b)) for k, b in d["bindings"]))


def plan_flow_problems(steps: Iterable[PlanStep], declared: Iterable[str]) -> list[str]:
    declared = set(declared)
    problems = []
    for i, step in enumerate(steps):
        for name, b in step.bindings:
            if b.source == "output" and b.value >= i:
                problems.append(f"step {i} binds output[{b.value}] (non-forward flow)")
            if b.source == "param" and b.value not in declared:
                problems.append(f"step {i} uses undeclared parameter {b.value!r}")
    return problems


# --- profiles ---------------------------------------------------------------


def _rel_dict(rel: Mapping[str, Iterable[int]]) -> dict:
    return {tag: list(rel[tag]) for tag in sorted(rel)}


@dataclass
class ToolProfile:
    name: str
    description: str
    preconditions: list[str] = field(default_factory=list)
    failure_patterns: list[str] = field(default_factory=list)
    usage_examples: list[dict] = field(default_factory=list)
    reliability: dict[str, list[int]] = field(default_factory=dict)
    revision_log: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "preconditions": list(self.preconditions),
            "failure_patterns": list(self.failure_patterns),
            "usage_examples": copy.deepcopy(self.usage_examples),
            "reliability": _rel_dict(self.reliability),
            "revision_log": list(self.revision_log),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToolProfile":
        return cls(d["name"], d["description"], list(d.get("preconditions", [])),
                   list(d.get("failure_patterns", [])), copy.deepcopy(list(d.get("usage_examples", []))),
                   {k: list(v) for k, v in (d.get("reliability") or {}).items()},
                   list(d.get("revision_log", [])))


@dataclass
class SkillTemplate:
    skill_id: str
    intent: str
    trigger_conditions: list[str] = field(default_factory=list)
    template: str | None = None
    steps: tuple[PlanStep, ...] | None = None
    parameters: tuple[str, ...] = ()
    revision_log: list[str] = field(default_factory=list)

    def problems(self) -> list[str]:
        out = []
        if not self.skill_id:
            out.append("empty skill_id")
        if not self.template and not self.steps:
            out.append("empty body")
        if self.template:
            used = {f for _, f, _, _ in string.Formatter().parse(self.template) if f}
            missing = used - set(self.parameters)
            if missing:
                out.append(f"undeclared placeholders {sorted(missing)}")
        if self.steps:
            out.extend(plan_flow_problems(self.steps, self.parameters))
        return out

    def to_dict(self) -> dict:
        return {
            "skill_id": self.skill_id,
            "intent": self.intent,
            "trigger_conditions": list(self.trigger_conditions),
            "template": self.template,
            "steps": [s.to_dict() for s in self.steps] if self.steps is not None else None,
            "parameters": list(self.parameters),
            "revision_log": list(self.revision_log),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SkillTemplate":
        steps = d.get("steps")
        return cls(d["skill_id"], d["intent"], list(d.get("trigger_conditions", [])), d.get("template"),
                   tuple(PlanStep.from_dict(s) for s in steps) if steps is not None else None,
                   tuple(d.get("parameters", [])), list(d.get("revision_log", [])))


@dataclass
class CompositeAction:
    composite_id: str
    goal: str
    steps: tuple[PlanStep, ...]
    preconditions: list[str] = field(default_factory=list)
    expected_output_pattern: str = ""
    parameters: tuple[str, ...] = ()
    reliability: dict[str, list[int]] = field(default_factory=dict)
    revision_log: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "composite_id": self.composite_id,
            "goal": self.goal,
            "steps": [s.to_dict() for s in self.steps],
            "preconditions": list(self.preconditions),
            "expected_output_pattern": self.expected_output_pattern,
            "parameters": list(self.parameters),
            "reliability": _rel_dict(self.reliability),
            "revision_log": list(self.revision_log),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CompositeAction":
        return cls(d["composite_id"], d["goal"], tuple(PlanStep.from_dict(s) for s in d["steps"]),
                   list(d.get("preconditions", [])), d.get("expected_output_pattern", ""),
                   tuple(d.get("parameters", [])),
                   {k: list(v) for k, v in (d.get("reliability") or {}).items()},
                   list(d.get("revision_log", [])))


@dataclass
class PeerProfile:
    peer_id: str
    expertise: dict[str, str] = field(default_factory=dict)
    reliability: dict[str, list[int]] = field(default_factory=dict)
    response_pattern_notes: list[str] = field(default_factory=list)
    revision_log: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "peer_id": self.peer_id,
            "expertise": {k: self.expertise[k] for k in sorted(self.expertise)},
            "reliability": _rel_dict(self.reliability),
            "response_pattern_notes": list(self.response_pattern_notes),
            "revision_log": list(self.revision_log),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PeerProfile":
        return cls(d["peer_id"], dict(d.get("expertise") or {}),
                   {k: list(v) for k, v in (d.get("reliability") or {}).items()},
                   list(d.get("response_pattern_notes", [])), list(d.get("revision_log", [])))


@dataclass(frozen=True)
class FeedbackEstimate:
    action_pattern: str
    expected_outcome_note: str
    support_count: int = 1

    def __post_init__(self):
        if self.support_count < 1:
            raise ValueError("support_count must be >= 1")

    def to_dict(self) -> dict:
        return {"action_pattern": self.action_pattern, "expected_outcome_note": self.expected_outcome_note,
                "support_count": self.support_count}


# --- revisions --------------------------------------------------------------


class EditKind(str, Enum):
    AMEND_DESCRIPTION = "AmendDescription"
    ADD_PRECONDITION = "AddPrecondition"
    ADD_FAILURE_PATTERN = "AddFailurePattern"
    ADD_EXAMPLE = "AddExample"
    ADJUST_RELIABILITY = "AdjustReliability"
    ADD_SKILL = "AddSkill"
    ADD_COMPOSITE = "AddComposite"
    AMEND_PEER_EXPERTISE = "AmendPeerExpertise"


_APPLICABLE = {
    "tool": {EditKind.AMEND_DESCRIPTION, EditKind.ADD_PRECONDITION, EditKind.ADD_FAILURE_PATTERN,
             EditKind.ADD_EXAMPLE, EditKind.ADJUST_RELIABILITY},
    "peer": {EditKind.AMEND_PEER_EXPERTISE, EditKind.ADJUST_RELIABILITY},
    "skill": {EditKind.AMEND_DESCRIPTION, EditKind.ADD_PRECONDITION, EditKind.ADD_SKILL},
    "composite": {EditKind.AMEND_DESCRIPTION, EditKind.ADD_PRECONDITION, EditKind.ADJUST_RELIABILITY,
                  EditKind.ADD_COMPOSITE},
}


@dataclass(frozen=True)
class Target:
    kind: str  # tool | peer | skill | composite
    name: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name}


@dataclass(frozen=True)
class Revision:
    revision_id: str
    target: Target
    edit_kind: EditKind
    payload: Mapping[str, Any]
    provenance: tuple[tuple[str, int], ...]
    committed: bool = False

    def to_dict(self) -> dict:
        return {
            "revision_id": self.revision_id,
            "target": self.target.to_dict(),
            "edit_kind": self.edit_kind.value,
            "payload": copy.deepcopy(dict(self.payload)),
            "provenance": [[t, s] for t, s in self.provenance],
            "committed": self.committed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Revision":
        return cls(d["revision_id"], Target(**d["target"]), EditKind(d["edit_kind"]), dict(d["payload"]),
                   tuple((t, int(s)) for t, s in d["provenance"]), bool(d.get("committed", False)))


def make_revision(target: Target, edit_kind: EditKind, payload: Mapping[str, Any],
                  provenance: Iterable[tuple[str, int]]) -> Revision:
    prov = tuple(sorted({(t, int(s)) for t, s in provenance}))
    digest = hashlib.sha256(dumps_line([target.to_dict(), edit_kind.value, dict(payload), prov]).encode()).hexdigest()
    return Revision(f"{edit_kind.value}-{digest[:12]}", target, edit_kind, dict(payload), prov)


@dataclass(frozen=True)
class Accepted:
    ok = True
    reason = None


@dataclass(frozen=True)
class Rejected:
    reason: str
    ok = False


# --- state ------------------------------------------------------------------


@dataclass
class CognitionState:
    """A materialized store version. Treat as read-only; revisions produce new states."""

    tools: dict[str, ToolProfile] = field(default_factory=dict)
    skills: dict[str, SkillTemplate] = field(default_factory=dict)
    composites: dict[str, CompositeAction] = field(default_factory=dict)
    peers: dict[str, PeerProfile] = field(default_factory=dict)
    feedback: list[FeedbackEstimate] = field(default_factory=list)
    version: int = 0

    def names(self) -> set[str]:
        return set(self.tools) | set(self.skills) | set(self.composites) | set(self.peers)

    def lookup(self, target: Target):
        table = {"tool": self.tools, "peer": self.peers, "skill": self.skills, "composite": self.composites}
        return table.get(target.kind, {}).get(target.name)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "tools": [self.tools[k].to_dict() for k in sorted(self.tools)],
            "skills": [self.skills[k].to_dict() for k in sorted(self.skills)],
            "composites": [self.composites[k].to_dict() for k in sorted(self.composites)],
            "peers": [self.peers[k].to_dict() for k in sorted(self.peers)],
            "feedback": [f.to_dict() for f in self.feedback],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CognitionState":
        return cls(
            tools={t["name"]: ToolProfile.from_dict(t) for t in d.get("tools", [])},
            skills={s["skill_id"]: SkillTemplate.from_dict(s) for s in d.get("skills", [])},
            composites={c["composite_id"]: CompositeAction.from_dict(c) for c in d.get("composites", [])},
            peers={p["peer_id"]: PeerProfile.from_dict(p) for p in d.get("peers", [])},
            feedback=[FeedbackEstimate(**f) for f in d.get("feedback", [])],
            version=int(d.get("version", 0)),
        )

    def dumps(self) -> str:
        return dumps_line(self.to_dict())


def _casefold_in(text: str, existing: Iterable[str]) -> bool:
    key = " ".join(text.split()).casefold()
    return any(" ".join(e.split()).casefold() == key for e in existing)


def _text(payload: Mapping, key: str = "text") -> str:
    v = payload.get(key)
    return v.strip() if isinstance(v, str) else ""


def _bump(rel: dict[str, list[int]], tags: Iterable[str], successes: int, attempts: int) -> None:
    for tag in tags:
        s, n = rel.get(tag, [0, 0])
        rel[tag] = [s + successes, n + attempts]


def apply_revision(state: CognitionState, rev: Revision) -> CognitionState:
    """Return the state that results from applying ``rev``; ``state`` is left untouched."""
    new = copy.deepcopy(state)
    p = rev.payload
    k = rev.edit_kind
    if k is EditKind.ADD_SKILL:
        skill = SkillTemplate.from_dict(p["skill"])
        skill.revision_log.append(rev.revision_id)
        new.skills[skill.skill_id] = skill
    elif k is EditKind.ADD_COMPOSITE:
        comp = CompositeAction.from_dict(p["composite"])
        comp.revision_log.append(rev.revision_id)
        new.composites[comp.composite_id] = comp
    else:
        obj = new.lookup(rev.target)
        if k is EditKind.AMEND_DESCRIPTION:
            attr = {"tool": "description", "skill": "intent", "composite": "goal"}[rev.target.kind]
            setattr(obj, attr, _text(p))
        elif k is EditKind.ADD_PRECONDITION:
            attr = "trigger_conditions" if rev.target.kind == "skill" else "preconditions"
            getattr(obj, attr).append(_text(p))
        elif k is EditKind.ADD_FAILURE_PATTERN:
            obj.failure_patterns.append(_text(p))
        elif k is EditKind.ADD_EXAMPLE:
            obj.usage_examples.append({"parameters": dict(p["parameters"]), "outcome": p["outcome"]})
        elif k is EditKind.ADJUST_RELIABILITY:
            _bump(obj.reliability, p["tags"], int(p["successes"]), int(p["attempts"]))
        elif k is EditKind.AMEND_PEER_EXPERTISE:
            obj.expertise[p["tag"]] = _text(p)
        obj.revision_log.append(rev.revision_id)
    new.version = state.version + 1
    return new


# --- the store --------------------------------------------------------------


class CognitionStore:
    """Seed state plus the ordered log of committed revisions.

    Commits are serialized through one lock; readers take ``pin()`` snapshots,
    which are never mutated afterwards.
    """

    def __init__(self, seed: CognitionState | None = None, revisions: Iterable[Revision] = ()):
        self.seed = copy.deepcopy(seed) if seed is not None else CognitionState()
        self.seed.version = 0
        self._lock = threading.Lock()
        self.revisions: list[Revision] = []
        self._state = copy.deepcopy(self.seed)
        for rev in revisions:
            self._state = apply_revision(self._state, rev)
            self.revisions.append(rev)

    @property
    def version(self) -> int:
        return self._state.version

    @property
    def state(self) -> CognitionState:
        return self._state

    def pin(self) -> CognitionState:
        return self._state

    def replay(self, upto: int | None = None) -> CognitionState:
        state = copy.deepcopy(self.seed)
        for rev in self.revisions[:upto]:
            state = apply_revision(state, rev)
        return state

    def at_version(self, version: int) -> "CognitionStore":
        if not 0 <= version <= self.version:
            raise ValueError(f"version {version} not in 0..{self.version}")
        return CognitionStore(self.seed, self.revisions[:version])

    def validate(self, rev: Revision) -> Accepted | Rejected:
        return validate_revision(self, rev)

    def commit(self, rev: Revision) -> int:
        return commit_revision(self, rev)

    # snapshot files

    def snapshot_lines(self) -> list[dict]:
        return [{"format_version": FORMAT_VERSION, "kind": "cognition", "seed": self.seed.to_dict()},
                *({"revision": r.to_dict()} for r in self.revisions)]

    def save(self, path: str | Path) -> None:
        write_jsonl(path, self.snapshot_lines())

    @classmethod
    def load(cls, path: str | Path) -> "CognitionStore":
        lines = read_jsonl(path)
        if not lines:
            raise MalformedLine(1, "empty cognition snapshot")
        head = lines[0]
        if head.get("format_version") != FORMAT_VERSION:
            raise FormatVersionMismatch(f"cognition snapshot version {head.get('format_version')!r}")
        try:
            seed = CognitionState.from_dict(head["seed"])
            revs = [Revision.from_dict(l["revision"]) for l in lines[1:]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(0, f"bad cognition snapshot: {exc}") from None
        return cls(seed, revs)


def _consumed_evidence(store: CognitionStore, target: Target) -> set[tuple[str, int]]:
    out: set[tuple[str, int]] = set()
    for r in store.revisions:
        if r.target == target and r.edit_kind is EditKind.ADJUST_RELIABILITY:
            out.update(r.provenance)
    return out


def validate_revision(store: CognitionStore, rev: Revision) -> Accepted | Rejected:
    state = store.pin()
    if rev.committed:
        return Rejected("already committed")
    if not rev.provenance:
        return Rejected("no provenance")
    if rev.edit_kind not in _APPLICABLE.get(rev.target.kind, set()):
        return Rejected(f"{rev.edit_kind.value} does not apply to a {rev.target.kind}")
    p = rev.payload
    if not p:
        return Rejected("empty payload")

    k = rev.edit_kind
    if k in (EditKind.ADD_SKILL, EditKind.ADD_COMPOSITE):
        if rev.target.name in state.names():
            return Rejected(f"duplicate: {rev.target.name!r} already exists")
        if k is EditKind.ADD_SKILL:
            try:
                skill = SkillTemplate.from_dict(p["skill"])
            except (KeyError, TypeError, ValueError) as exc:
                return Rejected(f"malformed skill: {exc}")
            if skill.skill_id != rev.target.name:
                return Rejected("skill id does not match target")
            problems = skill.problems() + (_plan_reference_problems(state, skill.steps) if skill.steps else [])
        else:
            try:
                comp = CompositeAction.from_dict(p["composite"])
            except (KeyError, TypeError, ValueError) as exc:
                return Rejected(f"malformed composite: {exc}")
            if comp.composite_id != rev.target.name:
                return Rejected("composite id does not match target")
            if not comp.steps:
                return Rejected("empty payload: composite has no steps")
            problems = plan_flow_problems(comp.steps, comp.parameters) + _plan_reference_problems(state, comp.steps)
        return Rejected(problems[0]) if problems else Accepted()

    obj = state.lookup(rev.target)
    if obj is None:
        return Rejected(f"target missing: {rev.target.kind} {rev.target.name!r}")

    if k is EditKind.AMEND_DESCRIPTION:
        new = _text(p)
        if not new:
            return Rejected("empty payload")
        attr = {"tool": "description", "skill": "intent", "composite": "goal"}[rev.target.kind]
        if new == getattr(obj, attr):
            return Rejected("duplicate: description unchanged")
    elif k in (EditKind.ADD_PRECONDITION, EditKind.ADD_FAILURE_PATTERN):
        new = _text(p)
        if not new:
            return Rejected("empty payload")
        if k is EditKind.ADD_FAILURE_PATTERN:
            existing = obj.failure_patterns
        else:
            existing = obj.trigger_conditions if rev.target.kind == "skill" else obj.preconditions
        if _casefold_in(new, existing):
            return Rejected("duplicate text")
    elif k is EditKind.ADD_EXAMPLE:
        params, out = p.get("parameters"), p.get("outcome")
        if not isinstance(params, Mapping) or not isinstance(out, str) or not out.strip():
            return Rejected("empty payload")
        if len(obj.usage_examples) >= MAX_EXAMPLES:
            return Rejected("example cap reached")
        for ex in obj.usage_examples:
            if dict(ex["parameters"]) == dict(params) and _casefold_in(out, [ex["outcome"]]):
                return Rejected("duplicate example")
    elif k is EditKind.ADJUST_RELIABILITY:
        try:
            s, n, tags = int(p["successes"]), int(p["attempts"]), list(p["tags"])
        except (KeyError, TypeError, ValueError):
            return Rejected("malformed reliability delta")
        if not tags or n < 1 or not 0 <= s <= n:
            return Rejected("malformed reliability delta")
        if _consumed_evidence(store, rev.target) & set(rev.provenance):
            return Rejected("duplicate: evidence already counted")
    elif k is EditKind.AMEND_PEER_EXPERTISE:
        tag, new = p.get("tag"), _text(p)
        if not tag or not new:
            return Rejected("empty payload")
        if obj.expertise.get(tag) == new:
            return Rejected("duplicate: expertise unchanged")
    return Accepted()


def _plan_reference_problems(state: CognitionState, steps) -> list[str]:
    out = []
    for i, step in enumerate(steps or ()):
        v, t = step.kind.variant, step.kind.target
        if v is ActionVariant.FINAL_ANSWER:
            out.append(f"step {i} is a FinalAnswer")
        elif v is ActionVariant.EMIC_TOOL_CALL and t not in state.tools:
            out.append(f"step {i} references unknown tool {t!r}")
        elif v.is_etic and t not in state.peers:
            out.append(f"step {i} references unknown peer {t!r}")
        elif v is ActionVariant.EMIC_SKILL_INVOKE and t not in state.skills:
            out.append(f"step {i} references unknown skill {t!r}")
        elif v is ActionVariant.EMIC_COMPOSITE_INVOKE and t not in state.composites:
            out.append(f"step {i} references unknown composite {t!r}")
    return out


def commit_revision(store: CognitionStore, rev: Revision) -> int:
    """Validate and append ``rev``; returns the new store version."""
    with store._lock:
        verdict = validate_revision(store, rev)
        if not verdict.ok:
            raise NotValidated(verdict.reason)
        payload = dict(rev.payload)
        if rev.edit_kind is EditKind.AMEND_DESCRIPTION:
            attr = {"tool": "description", "skill": "intent", "composite": "goal"}[rev.target.kind]
            payload["previous"] = getattr(store.state.lookup(rev.target), attr)
        committed = replace(rev, payload=payload, committed=True)
        store._state = apply_revision(store._state, committed)
        store.revisions.append(committed)
        return store.version


# --- rendering --------------------------------------------------------------


def _reliability_lines(rel: Mapping[str, list[int]], tags: Iterable[str]) -> list[str]:
    tags = sorted(set(tags))
    if not tags:
        s = sum(v[0] for v in rel.values())
        n = sum(v[1] for v in rel.values())
        return [f"reliability: {s}/{n} on tag any (estimate {estimate(s, n):.3f})"]
    out = []
    for tag in tags:
        s, n = rel.get(tag, [0, 0])
        out.append(f"reliability: {s}/{n} on tag {tag} (estimate {estimate(s, n):.3f})")
    return out


def _bullets(label: str, items: list[str]) -> list[str]:
    if not items:
        return [f"{label}: none"]
    return [f"{label}:"] + [f"- {x}" for x in items]


def render_knowledge(state: CognitionState, name: str, tags: Iterable[str] = ()) -> str:
    tags = list(tags)
    if name in state.tools:
        t = state.tools[name]
        lines = [f"description: {t.description}"]
        lines += _bullets("preconditions", t.preconditions)
        lines += _bullets("failure patterns", t.failure_patterns[-TOP_K_FAILURES:])
        lines += _reliability_lines(t.reliability, tags)
        for ex in t.usage_examples[-2:]:
            args = "; ".join(f"{k}={v}" for k, v in ex["parameters"].items())
            lines.append(f"example: {args} -> {ex['outcome']}")
        related = [f for f in state.feedback if f.action_pattern == name]
        lines += [f"expected feedback: {f.expected_outcome_note} (seen {f.support_count}x)" for f in related]
        return "\n".join(lines)
    if name in state.skills:
        s = state.skills[name]
        lines = [f"intent: {s.intent}"]
        lines += _bullets("triggers", s.trigger_conditions)
        if s.template:
            lines.append(f"template: {s.template}")
        if s.steps:
            lines.append("steps: " + " -> ".join(st.render() for st in s.steps))
        return "\n".join(lines)
    if name in state.composites:
        c = state.composites[name]
        lines = [f"goal: {c.goal}"]
        lines += _bullets("preconditions", c.preconditions)
        lines.append("steps: " + " -> ".join(st.render() for st in c.steps))
        if c.expected_output_pattern:
            lines.append(f"expected output: {c.expected_output_pattern}")
        lines += _reliability_lines(c.reliability, tags)
        return "\n".join(lines)
    if name in state.peers:
        p = state.peers[name]
        lines = ["expertise:"] + [f"- {tag}: {p.expertise[tag]}" for tag in sorted(p.expertise)]
        if not p.expertise:
            lines = ["expertise: unknown"]
        lines += [f"note: {n}" for n in p.response_pattern_notes]
        lines += _reliability_lines(p.reliability, tags)
        return "\n".join(lines)
    raise UnknownAction(name)


def query_action_knowledge(state: CognitionState, names: Iterable[str], domain_tags: Iterable[str] = ()) -> dict[str, str]:
    """Rendered descriptive block per requested action name, in name order."""
    tags = list(domain_tags)
    return {n: render_knowledge(state, n, tags) for n in sorted(set(names))}


def _target_for(state: CognitionState, name: str) -> Target:
    for kind, table in (("tool", state.tools), ("peer", state.peers), ("composite", state.composites)):
        if name in table:
            return Target(kind, name)
    raise UnknownAction(name)


def reliability_update(store: CognitionStore, target: str | Target, domain_tag: str | Iterable[str],
                       outcome: Outcome, provenance: Iterable[tuple[str, int]],
                       fulfilled: bool | None = None) -> Revision:
    """Propose the AdjustReliability revision for one observed outcome.

    Counts a success for a Success outcome, or for a PeerResponse only when the
    caller judged it ``fulfilled``.
    """
    state = store.pin()
    tgt = target if isinstance(target, Target) else _target_for(state, target)
    if state.lookup(tgt) is None or tgt.kind == "skill":
        raise UnknownAction(tgt.name)
    if fulfilled is None:
        fulfilled = outcome.status is OutcomeStatus.SUCCESS
    tags = [domain_tag] if isinstance(domain_tag, str) else sorted(set(domain_tag))
    payload = {"tags": tags or [NO_TAG], "successes": int(bool(fulfilled)), "attempts": 1}
    return make_revision(tgt, EditKind.ADJUST_RELIABILITY, payload, provenance)


def seed_state(tools: Iterable[Mapping] = (), peers: Iterable[Mapping] = (), skills: Iterable[Mapping] = (),
               composites: Iterable[Mapping] = (), feedback: Iterable[Mapping] = ()) -> CognitionState:
    """Initial cognition: tool and peer descriptions as handed to the agent."""
    state = CognitionState()
    for t in tools:
        if not t.get("description"):
            raise ValueError(f"tool {t.get('name')!r} needs a description")
        state.tools[t["name"]] = ToolProfile(t["name"], t["description"], list(t.get("preconditions", [])))
    for p in peers:
        state.peers[p["peer_id"]] = PeerProfile(p["peer_id"], dict(p.get("expertise") or {}))
    for s in skills:
        skill = SkillTemplate.from_dict(s)
        if skill.problems():
            raise ValueError(f"skill {skill.skill_id!r}: {skill.problems()[0]}")
        state.skills[skill.skill_id] = skill
    for c in composites:
        comp = CompositeAction.from_dict(c)
        problems = plan_flow_problems(comp.steps, comp.parameters) + _plan_reference_problems(state, comp.steps)
        if problems:
            raise ValueError(f"composite {comp.composite_id!r}: {problems[0]}")
        state.composites[comp.composite_id] = comp
    state.feedback = [FeedbackEstimate(**f) for f in feedback]
    return state
