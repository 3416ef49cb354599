"""Batch self-evolution: alignment verdicts, revisions, composite mining and skill distillation."""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backend import Backend, BackendError, simple_request
from .cognition import (
    NO_TAG,
    Binding,
    CognitionStore,
    CompositeAction,
    EditKind,
    PlanStep,
    Revision,
    SkillTemplate,
    Target,
    estimate,
    make_revision,
    reliability_update,
)
from .core import (
    ERROR_STATUSES,
    ActionRecord,
    ActionVariant,
    OutcomeStatus,
    Trajectory,
    deserialize_trajectory,
)
from .emo import Episode, render_raw

log = logging.getLogger(__name__)

StepRef = tuple[str, int]


class Verdict(str, Enum):
    FULFILLED = "Fulfilled"
    PARTIAL = "Partial"
    VIOLATED = "Violated"
    INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class AlignmentVerdict:
    step_ref: StepRef
    verdict: Verdict
    rationale: str

    def to_dict(self) -> dict:
        return {"step_ref": list(self.step_ref), "verdict": self.verdict.value, "rationale": self.rationale}


@dataclass(frozen=True)
class EvolutionConfig:
    min_support: int = 3
    min_success: float = 0.6
    max_len: int = 4
    failure_threshold: int = 3
    examples_per_tool: int = 3
    peer_high: float = 0.8
    peer_low: float = 0.3
    peer_min_attempts: int = 3
    overflow_high: float = 0.2
    mine: bool = True

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "EvolutionConfig":
        return cls(**dict(d or {}))


class EpisodeNotSuccessful(ValueError):
    pass


# --- corpus -----------------------------------------------------------------


def load_corpus(log_dir: str | Path) -> list[Trajectory]:
    """Every trajectory log in ``log_dir``, ordered by task id."""
    trajs = [deserialize_trajectory(p.read_bytes()) for p in sorted(Path(log_dir).glob("*.jsonl"))]
    return sorted(trajs, key=lambda t: t.task.task_id)


# --- alignment --------------------------------------------------------------

ALIGN_SYSTEM = ("Compare what the agent intended with what actually happened. Answer with one of "
                "Fulfilled, Partial or Violated, then a colon and a short reason.")
_VERDICT_RE = re.compile(r"^\W*(fulfilled|partial|violated)\b\s*:?\s*(.*)", re.IGNORECASE | re.DOTALL)


def _norm_answer(text: str) -> str:
    return " ".join(text.casefold().split()).strip(" .")


def align(record: ActionRecord, analyzer: Backend | None, task_id: str = "task",
          gold_answer: str | None = None, instruction: str = "") -> AlignmentVerdict:
    """Judge one step; structural rules first, then the analyzer."""
    ref = (task_id, record.step_index)
    out = record.outcome
    if out.status in ERROR_STATUSES:
        return AlignmentVerdict(ref, Verdict.VIOLATED, f"{out.status.value}: {out.error_detail}")
    if out.status is OutcomeStatus.CAP_EXCEEDED:
        return AlignmentVerdict(ref, Verdict.VIOLATED, "capacity exceeded")
    if record.kind.variant is ActionVariant.FINAL_ANSWER and gold_answer is not None:
        if _norm_answer(out.payload) == _norm_answer(gold_answer):
            return AlignmentVerdict(ref, Verdict.FULFILLED, "final answer matches the reference")
        return AlignmentVerdict(ref, Verdict.VIOLATED, "final answer differs from the reference")
    if analyzer is None:
        return AlignmentVerdict(ref, Verdict.INDETERMINATE, "no analyzer")
    prompt = (f"task: {instruction}\n"
              + render_raw(record.step_index, record.intention, record.kind, record.parameters, out))
    try:
        text = analyzer.complete(simple_request("align", ALIGN_SYSTEM, prompt)).text
    except BackendError as exc:
        return AlignmentVerdict(ref, Verdict.INDETERMINATE, f"analyzer unavailable: {exc}")
    m = _VERDICT_RE.match(text)
    if not m:
        return AlignmentVerdict(ref, Verdict.INDETERMINATE, "analyzer answer not understood")
    return AlignmentVerdict(ref, Verdict(m.group(1).capitalize()), m.group(2).strip())


def align_corpus(corpus: Sequence[Trajectory], analyzer: Backend | None) -> dict[StepRef, AlignmentVerdict]:
    verdicts = {}
    for traj in corpus:
        t = traj.task
        for rec in traj.records:
            v = align(rec, analyzer, t.task_id, t.gold_answer, t.instruction)
            verdicts[v.step_ref] = v
    return verdicts


def counts_as_success(verdict: AlignmentVerdict | None, record: ActionRecord) -> bool:
    if verdict is None or verdict.verdict is Verdict.INDETERMINATE:
        return record.outcome.status is OutcomeStatus.SUCCESS
    return verdict.verdict is Verdict.FULFILLED


# --- revisions --------------------------------------------------------------


def _word_prefix(texts: list[str]) -> str:
    split = [t.split() for t in texts]
    out = []
    for words in zip(*split):
        if len(set(words)) != 1:
            break
        out.append(words[0])
    return " ".join(out)


def propose_revisions(corpus: Sequence[Trajectory], verdicts: Mapping[StepRef, AlignmentVerdict],
                      store: CognitionStore, config: EvolutionConfig | None = None) -> list[Revision]:
    """Descriptive revisions backed by corpus evidence; nothing is committed here."""
    cfg = config or EvolutionConfig()
    state = store.pin()
    revisions: list[Revision] = []
    failures: dict[str, list[tuple[StepRef, str]]] = defaultdict(list)
    examples: dict[str, list[tuple[StepRef, ActionRecord]]] = defaultdict(list)
    peer_tally: dict[tuple[str, str], list] = defaultdict(lambda: [0, 0, []])

    for traj in corpus:
        tags = sorted(traj.task.domain_tags) or [NO_TAG]
        for rec in traj.records:
            ref = (traj.task.task_id, rec.step_index)
            v = verdicts.get(ref)
            kind = rec.kind
            if kind.variant is ActionVariant.EMIC_TOOL_CALL and kind.target in state.tools:
                target = Target("tool", kind.target)
            elif kind.variant.is_etic and kind.target in state.peers:
                target = Target("peer", kind.target)
            elif kind.variant is ActionVariant.EMIC_COMPOSITE_INVOKE and kind.target in state.composites:
                target = Target("composite", kind.target)
            else:
                continue
            ok = counts_as_success(v, rec)
            revisions.append(reliability_update(store, target, tags, rec.outcome, [ref], fulfilled=ok))

            if target.kind == "tool":
                if v is not None and v.verdict is Verdict.VIOLATED and rec.outcome.error_detail:
                    failures[target.name].append((ref, rec.outcome.error_detail))
                elif v is not None and v.verdict is Verdict.FULFILLED:
                    examples[target.name].append((ref, rec))
            elif target.kind == "peer":
                for tag in tags:
                    tally = peer_tally[(target.name, tag)]
                    tally[0] += ok
                    tally[1] += 1
                    tally[2].append(ref)

    for tool in sorted(failures):
        groups: dict[str, list[tuple[StepRef, str]]] = defaultdict(list)
        for ref, detail in failures[tool]:
            groups[" ".join(detail.casefold().split()[:3])].append((ref, detail))
        for key in sorted(groups):
            items = groups[key]
            if len(items) < cfg.failure_threshold:
                continue
            text = _word_prefix([d for _, d in items]) or key
            revisions.append(make_revision(Target("tool", tool), EditKind.ADD_FAILURE_PATTERN,
                                           {"text": text}, [r for r, _ in items]))

    for tool in sorted(examples):
        seen = []
        for ref, rec in examples[tool]:
            outcome = " ".join(rec.outcome.payload.split()[:20])
            key = (tuple(sorted(rec.parameters.items())), outcome)
            if key in seen:
                continue
            seen.append(key)
            revisions.append(make_revision(Target("tool", tool), EditKind.ADD_EXAMPLE,
                                           {"parameters": dict(rec.parameters), "outcome": outcome}, [ref]))
            if len(seen) >= cfg.examples_per_tool:
                break

    for (peer, tag), (s, n, refs) in sorted(peer_tally.items()):
        if n < cfg.peer_min_attempts:
            continue
        rate = estimate(s, n)
        if rate >= cfg.peer_high:
            text = f"strong: {s}/{n} answers on {tag} judged fulfilled"
        elif rate <= cfg.peer_low:
            text = f"weak: {s}/{n} answers on {tag} judged fulfilled"
        else:
            continue
        revisions.append(make_revision(Target("peer", peer), EditKind.AMEND_PEER_EXPERTISE,
                                       {"tag": tag, "text": text}, refs))
    return revisions


# --- composite mining -------------------------------------------------------


@dataclass(frozen=True)
class MinedComposite:
    candidate: CompositeAction
    support: int
    success_rate: float
    occurrences: tuple[tuple[int, int], ...] = ()  # (trajectory index, start step)


def minable(record: ActionRecord) -> bool:
    return (record.kind.variant is not ActionVariant.FINAL_ANSWER
            and record.outcome.status is not OutcomeStatus.PARSE_ERROR)


def _runs(traj: Trajectory) -> list[list[ActionRecord]]:
    """Maximal stretches of consecutive minable records."""
    runs, cur = [], []
    for rec in traj.records:
        if minable(rec):
            cur.append(rec)
        else:
            if cur:
                runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    return runs


def synthesize_bindings(occurrences: Sequence[Sequence[ActionRecord]]) -> tuple[tuple[PlanStep, ...], tuple[str, ...]]:
    """Plan steps for a sequence seen several times, plus its declared inputs.

    A parameter becomes ``output[j]`` when it equals step j's payload byte for
    byte in every occurrence (nearest such j), a literal when it never varies,
    and a declared input otherwise.
    """
    first = occurrences[0]
    inputs: list[str] = []
    steps = []
    for i, rec in enumerate(first):
        names = sorted(set().union(*(o[i].parameters for o in occurrences)))
        bindings = []
        for p in names:
            values = [o[i].parameters.get(p) for o in occurrences]
            flow = next((j for j in range(i - 1, -1, -1)
                         if all(v is not None and v == o[j].outcome.payload for v, o in zip(values, occurrences))),
                        None)
            if flow is not None:
                bindings.append((p, Binding("output", flow)))
            elif all(v is not None for v in values) and len(set(values)) == 1:
                bindings.append((p, Binding("literal", values[0])))
            else:
                name = p
                k = 2
                while name in inputs:
                    name = f"{p}_{k}"
                    k += 1
                inputs.append(name)
                bindings.append((p, Binding("param", name)))
        steps.append(PlanStep(rec.kind, tuple(bindings)))
    return tuple(steps), tuple(inputs)


def _fulfilled(rec: ActionRecord, task_id: str, verdicts: Mapping[StepRef, AlignmentVerdict] | None) -> bool:
    if verdicts is None:
        return rec.outcome.status is OutcomeStatus.SUCCESS
    return counts_as_success(verdicts.get((task_id, rec.step_index)), rec)


def composite_id(names: Sequence[str]) -> str:
    return "-then-".join(names)


def mine_composites(corpus: Sequence[Trajectory], min_support: int = 3, min_success: float = 0.6,
                    max_len: int = 4, verdicts: Mapping[StepRef, AlignmentVerdict] | None = None
                    ) -> list[MinedComposite]:
    """Frequent, successful contiguous action sequences, abstracted into composites.

    Without verdicts (or with an Indeterminate one) a step counts as Fulfilled
    when its outcome is Success.
    """
    if min_support < 2:
        raise ValueError("min_support must be >= 2")
    if not 2 <= max_len <= 6:
        raise ValueError("max_len must be in 2..6")

    occ: dict[tuple[str, ...], list[tuple[int, int, list[ActionRecord]]]] = defaultdict(list)
    for t_idx, traj in enumerate(corpus):
        for run in _runs(traj):
            for start in range(len(run)):
                for length in range(2, max_len + 1):
                    window = run[start:start + length]
                    if len(window) < length:
                        break
                    names = tuple(r.kind.name for r in window)
                    occ[names].append((t_idx, window[0].step_index, window))

    def stats(names):
        items = occ[names]
        wins = sum(_fulfilled(w[-1], corpus[t].task.task_id, verdicts) for t, _, w in items)
        return len(items), wins / len(items)

    qualifying = {}
    for names, items in occ.items():
        support, rate = stats(names)
        if support >= min_support and rate >= min_success:
            qualifying[names] = (support, rate)

    def contains(big, small):
        return len(big) > len(small) and any(big[i:i + len(small)] == small for i in range(len(big) - len(small) + 1))

    out = []
    for names, (support, rate) in qualifying.items():
        if any(s == support and contains(other, names) for other, (s, _) in qualifying.items()):
            continue
        items = occ[names]
        steps, inputs = synthesize_bindings([w for _, _, w in items])
        cand = CompositeAction(composite_id(names), "run " + " then ".join(names), steps, parameters=inputs)
        out.append(MinedComposite(cand, support, rate, tuple((t, s) for t, s, _ in items)))
    out.sort(key=lambda m: (-m.support, tuple(s.kind.name for s in m.candidate.steps)))
    return out


# --- skills -----------------------------------------------------------------

DISTILL_SYSTEM = ("Given a successful episode, list the situations in which its procedure should be reused. "
                  "Reply with one line: TRIGGERS: a; b; c")


def distill_skill(episode: Episode, records: Sequence[ActionRecord], instruction: str,
                  verdicts: Mapping[int, Verdict], analyzer: Backend | None = None) -> SkillTemplate:
    """Turn a successful episode into a reusable skill proposal.

    Parameter values that occur verbatim in the task instruction become
    placeholders ``{subject}``, ``{subject_2}`` and so on.
    """
    covered = [r for r in records if episode.first_step <= r.step_index <= episode.last_step]
    if not covered:
        raise EpisodeNotSuccessful("episode covers no recorded steps")
    for r in covered:
        if verdicts.get(r.step_index) not in (Verdict.FULFILLED, Verdict.PARTIAL):
            raise EpisodeNotSuccessful(f"step {r.step_index} was not successful")

    placeholders: dict[str, str] = {}
    steps = []
    for i, rec in enumerate(covered):
        bindings = []
        for p, value in rec.parameters.items():
            flow = next((j for j in range(i - 1, -1, -1) if covered[j].outcome.payload == value), None)
            if value and value in instruction:
                if value not in placeholders:
                    n = len(placeholders) + 1
                    placeholders[value] = "subject" if n == 1 else f"subject_{n}"
                bindings.append((p, Binding("param", placeholders[value])))
            elif flow is not None:
                bindings.append((p, Binding("output", flow)))
            else:
                bindings.append((p, Binding("literal", value)))
        steps.append(PlanStep(rec.kind, tuple(bindings)))

    triggers: list[str] = []
    if analyzer is not None:
        prompt = f"goal: {episode.goal}\nkey actions: {'; '.join(episode.key_actions)}\nresolution: {episode.resolution}"
        try:
            text = analyzer.complete(simple_request("distill", DISTILL_SYSTEM, prompt)).text
            m = re.search(r"TRIGGERS:\s*(.*)", text)
            if m:
                triggers = [t.strip() for t in m.group(1).split(";") if t.strip()]
        except BackendError as exc:
            log.debug("distill analyzer unavailable: %s", exc)
    if not triggers:
        triggers = list(episode.key_actions) or [episode.goal]

    digest = hashlib.sha256("|".join([episode.goal] + [s.render() for s in steps]).encode()).hexdigest()[:8]
    return SkillTemplate(f"skill-{digest}", episode.goal, triggers, None, tuple(steps),
                         tuple(placeholders.values()))


# --- the cycle --------------------------------------------------------------


@dataclass
class EvolutionResult:
    committed: int
    version: int
    by_kind: dict[str, int] = field(default_factory=dict)
    rejected: dict[str, int] = field(default_factory=dict)
    mined: int = 0
    fold_threshold: int | None = None

    def to_dict(self) -> dict:
        return {"committed": self.committed, "version": self.version, "by_kind": dict(sorted(self.by_kind.items())),
                "rejected": dict(sorted(self.rejected.items())), "mined": self.mined,
                "fold_threshold": self.fold_threshold}


def tune_fold_threshold(current: int, overflow_rate: float, high: float = 0.2, floor: int = 4) -> int:
    """Fold sooner when assembled memory keeps overflowing its budget."""
    if overflow_rate > high:
        return max(floor, current - 2)
    return current


def _commit_all(store: CognitionStore, revisions: Iterable[Revision], result: EvolutionResult) -> None:
    for rev in revisions:
        verdict = store.validate(rev)
        if not verdict.ok:
            reason = verdict.reason.split(":")[0]
            result.rejected[reason] = result.rejected.get(reason, 0) + 1
            continue
        store.commit(rev)
        result.committed += 1
        result.by_kind[rev.edit_kind.value] = result.by_kind.get(rev.edit_kind.value, 0) + 1


def evolution_cycle(corpus: Sequence[Trajectory], store: CognitionStore, config: EvolutionConfig | None = None,
                    analyzer: Backend | None = None, memory_stats: Sequence[Mapping] = (),
                    fold_threshold: int | None = None) -> EvolutionResult:
    """align -> propose -> validate -> commit, then mine -> validate -> commit."""
    cfg = config or EvolutionConfig()
    result = EvolutionResult(0, store.version)
    verdicts = align_corpus(corpus, analyzer)
    _commit_all(store, propose_revisions(corpus, verdicts, store, cfg), result)

    if cfg.mine:
        mined = mine_composites(corpus, cfg.min_support, cfg.min_success, cfg.max_len, verdicts)
        result.mined = len(mined)
        proposals = []
        for m in mined:
            prov = [(corpus[t].task.task_id, s + k) for t, s in m.occurrences for k in range(len(m.candidate.steps))]
            proposals.append(make_revision(Target("composite", m.candidate.composite_id), EditKind.ADD_COMPOSITE,
                                           {"composite": m.candidate.to_dict()}, prov))
        _commit_all(store, proposals, result)

    if fold_threshold is not None:
        steps = sum(int(s.get("steps", 0)) for s in memory_stats)
        degraded = sum(int(s.get("degraded_steps", 0)) for s in memory_stats)
        result.fold_threshold = tune_fold_threshold(fold_threshold, degraded / steps if steps else 0.0,
                                                    cfg.overflow_high)
    result.version = store.version
    return result


def edit_kind_counts(revisions: Iterable[Revision]) -> dict[str, int]:
    return dict(sorted(Counter(r.edit_kind.value for r in revisions).items()))
