"""Elastic memory: lossless step records, compact summaries, episodes and budgeted assembly."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .backend import Backend, BackendError, simple_request
from .core import (
    FORMAT_VERSION,
    ActionKind,
    ActionRecord,
    IndexGap,
    Outcome,
    dumps_line,
    token_count,
    truncate_to_tokens,
)

log = logging.getLogger(__name__)

FALLBACK_WORDS = 20
RECENT_RAW = 2
DEFAULT_FOLD_THRESHOLD = 12


class BudgetTooSmall(ValueError):
    pass


class RangeOverlap(ValueError):
    pass


class RangeTooShort(ValueError):
    pass


class Representation(str, Enum):
    RAW = "Raw"
    SUMMARY = "Summary"
    OMIT = "Omit"


# The selector may also answer with the boolean/None encoding.
_REP_WORDS = {
    "raw": Representation.RAW, "false": Representation.RAW,
    "summary": Representation.SUMMARY, "true": Representation.SUMMARY,
    "omit": Representation.OMIT, "none": Representation.OMIT,
}


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    selection_rationale: str
    action: ActionKind
    parameters: Mapping[str, str]
    outcome: Outcome
    raw_text: str
    raw_tokens: int

    @classmethod
    def from_action(cls, rec: ActionRecord) -> "StepRecord":
        text = render_raw(rec.step_index, rec.intention, rec.kind, rec.parameters, rec.outcome)
        return cls(rec.step_index, rec.intention, rec.kind, dict(rec.parameters), rec.outcome, text, token_count(text))

    def to_dict(self) -> dict:
        return {"step_index": self.step_index, "selection_rationale": self.selection_rationale,
                "action": self.action.to_dict(), "parameters": dict(self.parameters),
                "outcome": self.outcome.to_dict(), "raw_text": self.raw_text, "raw_tokens": self.raw_tokens}


def render_raw(step: int, intention: str, kind: ActionKind, params: Mapping[str, str], outcome: Outcome) -> str:
    lines = [f"step {step}", f"intention: {intention}",
             f"action: {kind.variant.value}" + (f" {kind.target}" if kind.target else "")]
    lines.append("params: " + ("; ".join(f"{k}={v}" for k, v in params.items()) if params else "none"))
    lines.append(f"status: {outcome.status.value}")
    if outcome.error_detail is not None:
        lines.append(f"error: {outcome.error_detail}")
    lines.append(f"payload: {outcome.payload}")
    return "\n".join(lines)


@dataclass(frozen=True)
class StepSummary:
    step_index: int
    summary_text: str
    outcome_tag: str
    summary_tokens: int

    def to_dict(self) -> dict:
        return {"step_index": self.step_index, "summary_text": self.summary_text,
                "outcome_tag": self.outcome_tag, "summary_tokens": self.summary_tokens}


@dataclass(frozen=True)
class Episode:
    episode_id: int
    first_step: int
    last_step: int
    goal: str
    key_actions: tuple[str, ...]
    resolution: str
    text: str
    episode_tokens: int

    @property
    def covered_range(self) -> tuple[int, int]:
        return (self.first_step, self.last_step)

    def covers(self, i: int) -> bool:
        return self.first_step <= i <= self.last_step

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "covered_range": [self.first_step, self.last_step],
                "goal": self.goal, "key_actions": list(self.key_actions), "resolution": self.resolution,
                "text": self.text, "episode_tokens": self.episode_tokens}


@dataclass
class MemoryPool:
    """Every ingested step keeps its raw record for good; episodes only add views."""

    steps: list[tuple[StepRecord, StepSummary]] = field(default_factory=list)
    episodes: list[Episode] = field(default_factory=list)
    fold_log: list[dict] = field(default_factory=list)
    compressor_fallbacks: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    def record(self, i: int) -> StepRecord:
        return self.steps[i][0]

    def summary(self, i: int) -> StepSummary:
        return self.steps[i][1]

    def episode_for(self, i: int) -> Episode | None:
        for ep in self.episodes:
            if ep.covers(i):
                return ep
        return None

    def unfolded(self) -> list[int]:
        return [i for i in range(len(self.steps)) if self.episode_for(i) is None]

    def raw_total(self) -> int:
        return sum(r.raw_tokens for r, _ in self.steps)

    def snapshot_lines(self, stats: Mapping | None = None) -> list[dict]:
        lines: list[dict] = [{"format_version": FORMAT_VERSION, "kind": "memory"}]
        lines += [{"step": r.to_dict(), "summary": s.to_dict()} for r, s in self.steps]
        lines += [{"episode": e.to_dict()} for e in self.episodes]
        lines += [{"fold": f} for f in self.fold_log]
        lines.append({"stats": dict(stats or {}, steps=len(self.steps), episodes=len(self.episodes),
                                    raw_tokens=self.raw_total())})
        return lines

    def dumps(self) -> str:
        return "\n".join(dumps_line(l) for l in self.snapshot_lines()) + "\n"


# --- ingest -----------------------------------------------------------------


def fallback_abstract(record: StepRecord) -> str:
    words = record.outcome.payload.split()[:FALLBACK_WORDS]
    text = f"{record.action.name} [{record.outcome.tag}] " + " ".join(words)
    return truncate_to_tokens(text.strip(), record.raw_tokens) or record.action.name[:1]


COMPRESS_SYSTEM = ("Compress one agent step into a single short line that keeps the action, "
                   "its outcome and any key values. Drop reasoning and filler.")


def ingest_step(pool: MemoryPool, record: StepRecord | ActionRecord, compressor: Backend | None) -> StepSummary:
    """Add the step's raw record and a summary no longer than it."""
    if isinstance(record, ActionRecord):
        record = StepRecord.from_action(record)
    if record.step_index != len(pool.steps):
        raise IndexGap(len(pool.steps), record.step_index)

    text = None
    if compressor is not None:
        try:
            text = compressor.complete(simple_request("compress", COMPRESS_SYSTEM, record.raw_text)).text.strip()
        except BackendError as exc:
            log.debug("compressor unavailable for step %d: %s", record.step_index, exc)
    if not text or token_count(text) > record.raw_tokens:
        pool.compressor_fallbacks += compressor is not None
        text = fallback_abstract(record)
    summary = StepSummary(record.step_index, text, record.outcome.tag, token_count(text))
    pool.steps.append((record, summary))
    return summary


# --- selection --------------------------------------------------------------


@dataclass(frozen=True)
class SelectorDecision:
    per_step: Mapping[int, Representation]
    fold_directive: tuple[int, int] | None = None
    from_fallback: bool = False

    def restricted_to(self, steps) -> "SelectorDecision":
        keep = set(steps)
        return SelectorDecision({i: r for i, r in self.per_step.items() if i in keep}, None, self.from_fallback)


def heuristic_decision(pool: MemoryPool) -> SelectorDecision:
    steps = pool.unfolded()
    recent = set(steps[-RECENT_RAW:])
    return SelectorDecision({i: Representation.RAW if i in recent else Representation.SUMMARY for i in steps},
                            None, True)


SELECTOR_SYSTEM = ("You manage an agent's memory. For each listed step decide whether the next decision "
                   "needs its full record (Raw), its summary (Summary) or nothing (Omit).")


def selector_prompt(pool: MemoryPool, context: str) -> str:
    lines = ["Task context:", context.strip() or "(none)", "", "Step summaries:"]
    for i in pool.unfolded():
        lines.append(f"[{i}] {pool.summary(i).summary_text}")
    if pool.episodes:
        lines.append("Episodes:")
        lines += [f"[E{e.episode_id} steps {e.first_step}-{e.last_step}] {e.text}" for e in pool.episodes]
    lines += ["", 'Answer with "i:Raw|Summary|Omit" for every step, comma separated. '
                  'Optionally append "; FOLD a-b" to condense steps a..b into one episode.']
    return "\n".join(lines)


_FOLD_RE = re.compile(r"FOLD\s+(\d+)\s*-\s*(\d+)", re.IGNORECASE)
_ITEM_RE = re.compile(r"\s*(\d+)\s*:\s*([A-Za-z]+)\s*")


def parse_selector_output(text: str, pool: MemoryPool) -> SelectorDecision | None:
    """Parsed decision, or None when the answer is unusable."""
    unfolded = pool.unfolded()
    allowed = set(unfolded)
    fold = None
    m = _FOLD_RE.search(text)
    if m:
        fold = (int(m.group(1)), int(m.group(2)))
        text = text[: m.start()] + text[m.end():]
    per_step: dict[int, Representation] = {}
    pieces = [p for p in re.split(r"[,;\n]", text) if p.strip()]
    if not pieces:
        return None
    for piece in pieces:
        mm = _ITEM_RE.fullmatch(piece)
        if not mm:
            return None
        i, word = int(mm.group(1)), mm.group(2).lower()
        rep = _REP_WORDS.get(word)
        if rep is None or i not in allowed or per_step.get(i, rep) is not rep:
            return None
        per_step[i] = rep
    default = heuristic_decision(pool).per_step
    for i in unfolded:
        per_step.setdefault(i, default[i])
    if fold is not None and not _fold_ok(fold, unfolded, per_step):
        fold = None
    return SelectorDecision(per_step, fold)


def _fold_ok(fold: tuple[int, int], unfolded: list[int], per_step: Mapping[int, Representation]) -> bool:
    a, b = fold
    if b - a < 1:
        return False
    allowed = set(unfolded)
    # only history that is in view can be condensed
    return all(i in allowed and per_step[i] is not Representation.OMIT for i in range(a, b + 1))


def select_representations(pool: MemoryPool, current_task_context: str, selector: Backend | None) -> SelectorDecision:
    if not pool.steps:
        raise ValueError("select_representations needs a non-empty pool")
    if not pool.unfolded():
        return SelectorDecision({})
    if selector is None:
        return heuristic_decision(pool)
    try:
        out = selector.complete(simple_request("selector", SELECTOR_SYSTEM, selector_prompt(pool, current_task_context)))
    except BackendError as exc:
        log.debug("selector unavailable: %s", exc)
        return heuristic_decision(pool)
    return parse_selector_output(out.text, pool) or heuristic_decision(pool)


# --- assembly ---------------------------------------------------------------


@dataclass(frozen=True)
class MemoryEntry:
    kind: str  # raw | summary | episode
    position: int
    label: str
    text: str
    tokens: int
    last: int = -1  # last step this entry speaks for


@dataclass(frozen=True)
class WorkingMemory:
    entries: tuple[MemoryEntry, ...]
    total_tokens: int
    budget: int | None
    degraded: bool = False

    def render(self) -> str:
        if not self.entries:
            return "no prior steps"
        return "\n\n".join(f"[{e.label}]\n{e.text}" for e in self.entries)


def _raw_entry(pool: MemoryPool, i: int) -> MemoryEntry:
    r = pool.record(i)
    return MemoryEntry("raw", i, f"step {i} | raw", r.raw_text, r.raw_tokens, i)


def _summary_entry(pool: MemoryPool, i: int) -> MemoryEntry:
    s = pool.summary(i)
    return MemoryEntry("summary", i, f"step {i} | summary", s.summary_text, s.summary_tokens, i)


def _episode_entry(e: Episode) -> MemoryEntry:
    return MemoryEntry("episode", e.first_step, f"episode {e.episode_id} | steps {e.first_step}-{e.last_step}",
                       e.text, e.episode_tokens, e.last_step)


def assemble_working_memory(pool: MemoryPool, decision: SelectorDecision, budget: int) -> WorkingMemory:
    """Interleave the chosen representations in step order and enforce ``budget``.

    Over budget, raws are demoted to summaries oldest first, then summaries and
    episodes are dropped oldest first. The entry holding the newest step is
    never dropped.
    """
    unfolded = pool.unfolded()
    if set(decision.per_step) != set(unfolded):
        raise ValueError("decision does not cover exactly the un-folded steps")

    entries: list[MemoryEntry] = [_episode_entry(e) for e in pool.episodes]
    for i in unfolded:
        rep = decision.per_step[i]
        if rep is Representation.RAW:
            entries.append(_raw_entry(pool, i))
        elif rep is Representation.SUMMARY:
            entries.append(_summary_entry(pool, i))
    entries.sort(key=lambda e: e.position)

    newest = len(pool.steps) - 1
    protected = next((idx for idx, e in enumerate(entries) if e.last == newest), None)
    if protected is not None:
        e = entries[protected]
        floor = pool.summary(newest).summary_tokens if e.kind != "episode" else e.tokens
        if floor > budget:
            raise BudgetTooSmall(f"newest step needs {floor} tokens, budget is {budget}")

    total = sum(e.tokens for e in entries)
    degraded = total > budget
    for idx, e in enumerate(entries):
        if total <= budget:
            break
        if e.kind == "raw":
            demoted = _summary_entry(pool, e.position)
            total += demoted.tokens - e.tokens
            entries[idx] = demoted
    dropped: set[int] = set()
    for idx, e in enumerate(entries):
        if total <= budget:
            break
        if idx != protected:
            dropped.add(idx)
            total -= e.tokens
    kept = tuple(e for idx, e in enumerate(entries) if idx not in dropped)
    return WorkingMemory(kept, total, budget, degraded)


def assemble_full_raw(pool: MemoryPool) -> WorkingMemory:
    """Plain concatenation of every raw record; the memory-off baseline."""
    entries = tuple(_raw_entry(pool, i) for i in range(len(pool.steps)))
    return WorkingMemory(entries, sum(e.tokens for e in entries), None)


# --- folding and episodes ---------------------------------------------------


FOLD_SYSTEM = ("Condense these consecutive agent steps into one episode. Reply with three lines: "
               "GOAL: ..., KEY_ACTIONS: a; b; c, RESOLUTION: ...")

_FOLD_FIELDS = re.compile(r"^\s*(GOAL|KEY_ACTIONS|RESOLUTION)\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)


def _parse_episode(text: str) -> tuple[str, tuple[str, ...], str] | None:
    fields = {m.group(1).upper(): m.group(2).strip() for m in _FOLD_FIELDS.finditer(text)}
    if not fields.get("GOAL"):
        return None
    actions = tuple(a.strip() for a in fields.get("KEY_ACTIONS", "").split(";") if a.strip())
    return fields["GOAL"], actions, fields.get("RESOLUTION", "")


def mem_fold(pool: MemoryPool, first: int, last: int, summarizer: Backend | None) -> Episode:
    """Condense steps ``first..last`` into an episode; raw records stay in the pool."""
    if last - first + 1 < 2:
        raise RangeTooShort(f"fold range {first}-{last} covers fewer than 2 steps")
    if first < 0 or last >= len(pool.steps):
        raise IndexError(f"fold range {first}-{last} outside pool of {len(pool.steps)} steps")
    for e in pool.episodes:
        if not (last < e.first_step or first > e.last_step):
            raise RangeOverlap(f"fold range {first}-{last} overlaps episode {e.episode_id}")

    summaries = [pool.summary(i) for i in range(first, last + 1)]
    budget = sum(s.summary_tokens for s in summaries)
    parsed = None
    if summarizer is not None:
        prompt = "\n".join(f"[{s.step_index}] {s.summary_text}" for s in summaries)
        try:
            parsed = _parse_episode(summarizer.complete(simple_request("fold", FOLD_SYSTEM, prompt)).text)
        except BackendError as exc:
            log.debug("fold summarizer unavailable: %s", exc)

    if parsed is not None:
        goal, actions, resolution = parsed
        body = f"goal: {goal}; key actions: {', '.join(actions) or 'none'}; resolution: {resolution or 'n/a'}"
        text = truncate_to_tokens(body, budget - 1)
    else:
        goal = truncate_to_tokens(" | ".join(s.summary_text for s in summaries), max(1, budget // 2))
        actions, resolution, text = (), "", goal
    if not text:
        text = summaries[0].summary_text[:1]
        goal = goal or text

    ep = Episode(len(pool.episodes) + 1, first, last, goal, actions, resolution, text, token_count(text))
    pool.episodes.append(ep)
    pool.episodes.sort(key=lambda e: e.first_step)
    pool.fold_log.append({"episode_id": ep.episode_id, "range": [first, last],
                          "source": "summarizer" if parsed else "fallback"})
    return ep


def auto_fold_range(pool: MemoryPool, threshold: int = DEFAULT_FOLD_THRESHOLD) -> tuple[int, int] | None:
    """Oldest half of the un-folded steps once there are more than ``threshold`` of them."""
    unfolded = pool.unfolded()
    if len(unfolded) <= threshold:
        return None
    half = unfolded[: len(unfolded) // 2]
    run = [half[0]]
    for i in half[1:]:
        if i != run[-1] + 1:
            break
        run.append(i)
    return (run[0], run[-1]) if len(run) >= 2 else None


_WORD = re.compile(r"\w+")


def _words(text: str) -> set[str]:
    return {w.casefold() for w in _WORD.findall(text)}


def retrieve_episodes(pool: MemoryPool, query: str, k: int) -> list[Episode]:
    """Episodes sharing at least one word with ``query``, best overlap first, newer first on ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _words(query)
    scored = []
    for e in pool.episodes:
        score = len(q & _words(" ".join((e.goal, *e.key_actions))))
        if score:
            scored.append((-score, -e.last_step, e))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [e for _, _, e in scored[:k]]
