"""Shared domain types, token accounting and the trajectory log.

Everything here is an immutable value once built. Trajectories grow through
:func:`append_record`, which returns a new trajectory and never touches the
records it already holds.

Log format (``FORMAT_VERSION`` 1), one JSON object per line, UTF-8:

* header: ``{"format_version", "task_id", "task", "config_snapshot"}``
* one line per :class:`ActionRecord`
* final: ``{"final_status", "final_answer", "usage"}``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

FORMAT_VERSION = 1


class IndexGap(ValueError):
    """A record or step arrived with the wrong step index."""

    def __init__(self, expected: int, got: int):
        super().__init__(f"expected step_index {expected}, got {got}")
        self.expected = expected
        self.got = got


class FormatVersionMismatch(ValueError):
    pass


class MalformedLine(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


# --- token accounting -------------------------------------------------------


def token_count(text: str) -> int:
    """Approximate token count: mean of ``ceil(bytes/4)`` and the word count, rounded up."""
    if not text:
        return 0
    by_bytes = math.ceil(len(text.encode("utf-8")) / 4)
    words = len(text.split())
    return math.ceil((by_bytes + words) / 2)


def truncate_to_tokens(text: str, limit: int) -> str:
    """Longest prefix of ``text`` with at most ``limit`` tokens.

    Prefers to cut at a word boundary. Relies on token_count being
    non-decreasing under appending.
    """
    if token_count(text) <= limit:
        return text
    if limit <= 0:
        return ""
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if token_count(text[:mid]) <= limit:
            lo = mid
        else:
            hi = mid - 1
    cut = text[:lo]
    space = cut.rstrip().rfind(" ")
    if space > 0:
        cut = cut[:space]
    return cut.rstrip()


# --- actions and outcomes ---------------------------------------------------


class ActionVariant(str, Enum):
    EMIC_GENERATE = "EmicGenerate"
    EMIC_TOOL_CALL = "EmicToolCall"
    EMIC_SKILL_INVOKE = "EmicSkillInvoke"
    EMIC_COMPOSITE_INVOKE = "EmicCompositeInvoke"
    ETIC_ASK = "EticAsk"
    ETIC_DELEGATE = "EticDelegate"
    FINAL_ANSWER = "FinalAnswer"

    @property
    def needs_target(self) -> bool:
        return self not in (ActionVariant.EMIC_GENERATE, ActionVariant.FINAL_ANSWER)

    @property
    def is_etic(self) -> bool:
        return self in (ActionVariant.ETIC_ASK, ActionVariant.ETIC_DELEGATE)


# Fixed ordering used when listing the action space.
VARIANT_ORDER = list(ActionVariant)


@dataclass(frozen=True)
class ActionKind:
    variant: ActionVariant
    target: str | None = None

    def __post_init__(self):
        if not isinstance(self.variant, ActionVariant):
            object.__setattr__(self, "variant", ActionVariant(self.variant))
        if self.variant.needs_target != bool(self.target):
            raise ValueError(f"{self.variant.value}: target must be "
                             f"{'present' if self.variant.needs_target else 'absent'}")

    @property
    def name(self) -> str:
        """Short action name as used in paths and mining keys."""
        if self.variant is ActionVariant.EMIC_GENERATE:
            return "Generate"
        if self.variant is ActionVariant.FINAL_ANSWER:
            return "FinalAnswer"
        if self.variant is ActionVariant.ETIC_ASK:
            return f"Ask:{self.target}"
        if self.variant is ActionVariant.ETIC_DELEGATE:
            return f"Delegate:{self.target}"
        return self.target  # type: ignore[return-value]

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "target": self.target}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ActionKind":
        return cls(ActionVariant(d["variant"]), d.get("target"))


class OutcomeStatus(str, Enum):
    SUCCESS = "Success"
    TOOL_ERROR = "ToolError"
    PARSE_ERROR = "ParseError"
    PEER_RESPONSE = "PeerResponse"
    TIMEOUT = "Timeout"
    CAP_EXCEEDED = "CapExceeded"

    @property
    def is_error(self) -> bool:
        return self in ERROR_STATUSES


ERROR_STATUSES = frozenset({OutcomeStatus.TOOL_ERROR, OutcomeStatus.PARSE_ERROR, OutcomeStatus.TIMEOUT})


@dataclass(frozen=True)
class Outcome:
    status: OutcomeStatus
    payload: str
    error_detail: str | None = None

    def __post_init__(self):
        if not isinstance(self.status, OutcomeStatus):
            object.__setattr__(self, "status", OutcomeStatus(self.status))
        if self.status.is_error != (self.error_detail is not None):
            raise ValueError(f"{self.status.value}: error_detail must be "
                             f"{'present' if self.status.is_error else 'absent'}")
        if not self.payload and self.status is not OutcomeStatus.CAP_EXCEEDED:
            raise ValueError(f"{self.status.value}: payload must be non-empty")

    @classmethod
    def success(cls, payload: str) -> "Outcome":
        return cls(OutcomeStatus.SUCCESS, payload)

    @classmethod
    def error(cls, status: OutcomeStatus, detail: str) -> "Outcome":
        return cls(status, f"error: {detail}", detail)

    @property
    def tag(self) -> str:
        if self.status is OutcomeStatus.SUCCESS:
            return "ok"
        if self.status is OutcomeStatus.PEER_RESPONSE:
            return "peer"
        return "err"

    def to_dict(self) -> dict:
        return {"status": self.status.value, "payload": self.payload, "error_detail": self.error_detail}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Outcome":
        return cls(OutcomeStatus(d["status"]), d["payload"], d.get("error_detail"))


# --- tasks, records, trajectories -------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    domain_tags: frozenset[str] = frozenset()
    reference_path: tuple[str, ...] | None = None
    gold_answer: str | None = None

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if not self.instruction:
            raise ValueError("instruction must be non-empty")
        object.__setattr__(self, "domain_tags", frozenset(self.domain_tags))
        if self.reference_path is not None:
            object.__setattr__(self, "reference_path", tuple(self.reference_path))

    @property
    def embodied(self) -> bool:
        return "embodied" in self.domain_tags

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "domain_tags": sorted(self.domain_tags),
            "reference_path": list(self.reference_path) if self.reference_path is not None else None,
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskSpec":
        ref = d.get("reference_path")
        return cls(
            task_id=d["task_id"],
            instruction=d["instruction"],
            domain_tags=frozenset(d.get("domain_tags") or ()),
            reference_path=tuple(ref) if ref is not None else None,
            gold_answer=d.get("gold_answer"),
        )


@dataclass(frozen=True)
class ActionRecord:
    step_index: int
    intention: str
    kind: ActionKind
    parameters: Mapping[str, str]
    outcome: Outcome
    start_tick: int = 0
    end_tick: int = 0

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        if not self.intention:
            raise ValueError("intention must be non-empty")
        if self.end_tick < self.start_tick:
            raise ValueError("end_tick before start_tick")
        object.__setattr__(self, "parameters", dict(self.parameters))

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "intention": self.intention,
            "kind": self.kind.to_dict(),
            "parameters": dict(self.parameters),
            "outcome": self.outcome.to_dict(),
            "ticks": [self.start_tick, self.end_tick],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ActionRecord":
        start, end = d["ticks"]
        params = d["parameters"]
        if not isinstance(params, dict) or not all(isinstance(v, str) for v in params.values()):
            raise ValueError("parameters must map names to strings")
        return cls(
            step_index=d["step_index"],
            intention=d["intention"],
            kind=ActionKind.from_dict(d["kind"]),
            parameters=params,
            outcome=Outcome.from_dict(d["outcome"]),
            start_tick=start,
            end_tick=end,
        )


class FinalStatus(str, Enum):
    SOLVED = "Solved"
    FAILED = "Failed"
    CAP_HIT = "CapHit"


@dataclass(frozen=True)
class Trajectory:
    task: TaskSpec
    records: tuple[ActionRecord, ...] = ()
    final_status: FinalStatus | None = None
    final_answer: str | None = None
    config_snapshot: Mapping[str, Any] = field(default_factory=dict)
    # prompt/completion token totals over every backend call made for the task
    usage: Mapping[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for i, r in enumerate(self.records):
            if r.step_index != i:
                raise IndexGap(i, r.step_index)
        if self.final_status is not None and not isinstance(self.final_status, FinalStatus):
            object.__setattr__(self, "final_status", FinalStatus(self.final_status))

    def __len__(self) -> int:
        return len(self.records)

    def action_names(self) -> list[str]:
        return [r.kind.name for r in self.records]


def append_record(trajectory: Trajectory, record: ActionRecord) -> Trajectory:
    if record.step_index != len(trajectory.records):
        raise IndexGap(len(trajectory.records), record.step_index)
    return replace(trajectory, records=trajectory.records + (record,))


def finish(trajectory: Trajectory, status: FinalStatus, answer: str | None = None,
           usage: Mapping[str, int] | None = None) -> Trajectory:
    changes: dict[str, Any] = {"final_status": status, "final_answer": answer}
    if usage is not None:
        changes["usage"] = dict(usage)
    return replace(trajectory, **changes)


# --- serialization ----------------------------------------------------------


def dumps_line(obj: Any) -> str:
    """Canonical one-line JSON used by every log and snapshot file."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def trajectory_lines(trajectory: Trajectory) -> list[str]:
    header = {
        "format_version": FORMAT_VERSION,
        "task_id": trajectory.task.task_id,
        "task": trajectory.task.to_dict(),
        "config_snapshot": trajectory.config_snapshot,
    }
    final = {
        "final_status": trajectory.final_status.value if trajectory.final_status else None,
        "final_answer": trajectory.final_answer,
        "usage": dict(trajectory.usage),
    }
    return [dumps_line(header), *(dumps_line(r.to_dict()) for r in trajectory.records), dumps_line(final)]


def serialize_trajectory(trajectory: Trajectory) -> bytes:
    return ("\n".join(trajectory_lines(trajectory)) + "\n").encode("utf-8")


def _load(line_no: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "expected a JSON object")
    return obj


def deserialize_trajectory(stream: bytes | str) -> Trajectory:
    if isinstance(stream, bytes):
        try:
            stream = stream.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedLine(stream[: exc.start].count(b"\n") + 1, "invalid UTF-8") from None
    lines = stream.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedLine(1, "empty stream")

    header = _load(1, lines[0])
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"expected format_version {FORMAT_VERSION}, got {header.get('format_version')!r}")
    try:
        task = TaskSpec.from_dict(header["task"])
        snapshot = header["config_snapshot"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedLine(1, f"bad header: {exc}") from None

    if len(lines) < 2:
        raise MalformedLine(2, "missing final-status line")
    records = []
    for n, line in enumerate(lines[1:-1], start=2):
        obj = _load(n, line)
        try:
            rec = ActionRecord.from_dict(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(n, f"bad record: {exc}") from None
        if rec.step_index != len(records):
            raise MalformedLine(n, f"step_index {rec.step_index} out of order")
        records.append(rec)

    last_no = len(lines)
    final = _load(last_no, lines[-1])
    if "final_status" not in final:
        raise MalformedLine(last_no, "missing final_status")
    try:
        status = FinalStatus(final["final_status"]) if final["final_status"] is not None else None
    except ValueError:
        raise MalformedLine(last_no, f"unknown final_status {final['final_status']!r}") from None
    usage = final.get("usage") or {"prompt_tokens": 0, "completion_tokens": 0}
    return Trajectory(task, tuple(records), status, final.get("final_answer"), snapshot, usage)


def write_jsonl(path, objs: Iterable[Any]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in objs:
            fh.write(dumps_line(obj) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                out.append(_load(n, line))
    return out
