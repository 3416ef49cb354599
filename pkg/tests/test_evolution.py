import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from evoagent.backend import ScriptedBackend, ScriptedScenario
from evoagent.cognition import CognitionStore, EditKind, Target, make_revision, seed_state
from evoagent.core import ActionKind, ActionVariant, OutcomeStatus
from evoagent.emo import Episode
from evoagent.evolution import (
    EpisodeNotSuccessful,
    EvolutionConfig,
    Verdict,
    align,
    align_corpus,
    distill_skill,
    evolution_cycle,
    mine_composites,
    propose_revisions,
    tune_fold_threshold,
)

from _helpers import record, trajectory
from miner_oracle import brute_force_mine

FINAL = ActionKind(ActionVariant.FINAL_ANSWER)


def analyzer(text):
    return ScriptedBackend(ScriptedScenario(default_response=text))


def status_judge():
    return ScriptedBackend(ScriptedScenario.from_dict({"policies": {"align": "status_judge"}}))


def store(tools=("search", "extract"), peers=()):
    return CognitionStore(seed_state(tools=[{"name": t, "description": t} for t in tools],
                                     peers=[{"peer_id": p} for p in peers]))


# --- alignment --------------------------------------------------------------


def test_alignment_floor_rules():
    err = record(0, "search", "missing api key", OutcomeStatus.TOOL_ERROR)
    assert align(err, analyzer("Fulfilled: fine")).verdict is Verdict.VIOLATED
    cap = record(1, "search", "too deep", OutcomeStatus.CAP_EXCEEDED)
    assert align(cap, analyzer("Fulfilled: fine")).verdict is Verdict.VIOLATED
    final = record(2, payload="Paris.", kind=FINAL)
    assert align(final, None, gold_answer="paris").verdict is Verdict.FULFILLED
    assert align(final, None, gold_answer="Rome").verdict is Verdict.VIOLATED
    ok = record(3, "search", "some text")
    assert align(ok, None).verdict is Verdict.INDETERMINATE
    assert align(ok, analyzer("I am not sure")).verdict is Verdict.INDETERMINATE
    v = align(ok, analyzer("Partial: only half of it"), task_id="t9")
    assert v.verdict is Verdict.PARTIAL and v.rationale == "only half of it" and v.step_ref == ("t9", 3)


# --- descriptive revisions ---------------------------------------------------


def test_repeated_failures_become_one_pattern():
    recs = [record(i, "search", "missing api key for provider", OutcomeStatus.TOOL_ERROR) for i in range(5)]
    corpus = [trajectory("t1", recs)]
    s = store()
    revs = propose_revisions(corpus, align_corpus(corpus, None), s)
    patterns = [r for r in revs if r.edit_kind is EditKind.ADD_FAILURE_PATTERN]
    assert len(patterns) == 1
    assert patterns[0].payload["text"] == "missing api key for provider"
    assert sorted(patterns[0].provenance) == [("t1", i) for i in range(5)]


def test_below_threshold_failures_make_no_pattern():
    recs = [record(i, "search", "missing api key", OutcomeStatus.TOOL_ERROR) for i in range(2)]
    corpus = [trajectory("t1", recs)]
    revs = propose_revisions(corpus, align_corpus(corpus, None), store())
    assert not [r for r in revs if r.edit_kind is EditKind.ADD_FAILURE_PATTERN]


def _peer_corpus(outcomes):
    ask = ActionKind(ActionVariant.ETIC_ASK, "bob")
    return [trajectory(f"t{i}", [record(0, payload="answer", kind=ask)], tags=("math",))
            for i in range(len(outcomes))], ask


def test_peer_expertise_thresholds():
    for verdicts_text, expected in [(["Fulfilled"] * 3, "strong: 3/3"), (["Violated"] * 3, "weak: 0/3"),
                                    (["Fulfilled", "Violated", "Fulfilled", "Violated"], None),
                                    (["Fulfilled"] * 2, None)]:
        corpus, _ = _peer_corpus(verdicts_text)
        verdicts = {}
        for traj, text in zip(corpus, verdicts_text):
            verdicts.update(align_corpus([traj], analyzer(f"{text}: judged")))
        revs = propose_revisions(corpus, verdicts, store(peers=("bob",)))
        amend = [r for r in revs if r.edit_kind is EditKind.AMEND_PEER_EXPERTISE]
        if expected is None:
            assert amend == []
        else:
            assert len(amend) == 1 and amend[0].payload["text"].startswith(expected)
            assert amend[0].payload["tag"] == "math"


def test_examples_are_capped_and_distinct():
    recs = [record(i, "search", f"result {i % 4}", params={"query": f"q{i % 4}"}) for i in range(8)]
    corpus = [trajectory("t1", recs)]
    revs = propose_revisions(corpus, align_corpus(corpus, status_judge()), store())
    examples = [r for r in revs if r.edit_kind is EditKind.ADD_EXAMPLE]
    assert len(examples) == 3
    assert len({r.payload["outcome"] for r in examples}) == 3


def test_empty_corpus():
    s = store()
    assert propose_revisions([], {}, s) == []
    result = evolution_cycle([], s)
    assert result.committed == 0 and s.version == 0


# --- mining -----------------------------------------------------------------


def _search_extract(task, year, tail=True):
    text = f"{task} was born in {year}."
    recs = [record(0, "search", text, params={"query": task}),
            record(1, "extract", year, params={"text": text, "pattern": r"(\d{4})"})]
    if tail:
        recs.append(record(2, payload=year, kind=FINAL))
    return trajectory(task, recs)


def test_mined_composite_with_flow_literal_and_input():
    corpus = [_search_extract(f"person{i}", str(1900 + i)) for i in range(4)]
    mined = mine_composites(corpus, min_support=3)
    assert len(mined) == 1
    m = mined[0]
    assert m.candidate.composite_id == "search-then-extract" and m.support == 4 and m.success_rate == 1.0
    steps = [{k: (b.source, b.value) for k, b in s.bindings} for s in m.candidate.steps]
    assert steps == [{"query": ("param", "query")}, {"pattern": ("literal", r"(\d{4})"), "text": ("output", 0)}]
    assert m.candidate.parameters == ("query",)


def test_mining_thresholds_and_maximality():
    corpus = [_search_extract(f"p{i}", str(1900 + i)) for i in range(2)]
    assert mine_composites(corpus, min_support=3) == []
    # a,b,c three times: only the maximal a-b-c survives since its support equals a-b and b-c
    corpus = [trajectory(f"t{i}", [record(0, "a"), record(1, "b"), record(2, "c")]) for i in range(3)]
    assert [m.candidate.composite_id for m in mine_composites(corpus)] == ["a-then-b-then-c"]
    failing = [trajectory(f"t{i}", [record(0, "a"), record(1, "b", "x", OutcomeStatus.TOOL_ERROR)])
               for i in range(3)]
    assert mine_composites(failing) == []
    with pytest.raises(ValueError):
        mine_composites(corpus, min_support=1)


def test_parse_errors_break_windows():
    bad = record(1, "junk", "bad", OutcomeStatus.PARSE_ERROR)
    corpus = [trajectory(f"t{i}", [record(0, "a"), bad, record(2, "b")]) for i in range(4)]
    assert mine_composites(corpus) == []


NAMES = ["a", "b", "c"]
PAYLOADS = ["x", "y", "z"]

step_strategy = st.tuples(
    st.sampled_from(NAMES + ["FINAL"]),
    st.sampled_from(PAYLOADS),
    st.sampled_from(["ok", "ok", "ok", "err", "parse"]),
    st.dictionaries(st.sampled_from(["p", "q"]), st.sampled_from(PAYLOADS + ["w"]), max_size=2),
)
corpus_strategy = st.lists(st.lists(step_strategy, min_size=1, max_size=8), min_size=1, max_size=20)
STATUS = {"ok": OutcomeStatus.SUCCESS, "err": OutcomeStatus.TOOL_ERROR, "parse": OutcomeStatus.PARSE_ERROR}


def _build(spec):
    corpus = []
    for t, steps in enumerate(spec):
        recs = []
        for i, (name, payload, status, params) in enumerate(steps):
            kind = FINAL if name == "FINAL" else None
            recs.append(record(i, name, payload, STATUS[status], params, kind=kind))
        corpus.append(trajectory(f"t{t:02d}", recs))
    return corpus


def _render(mined):
    out = []
    for m in mined:
        plan = tuple(tuple((k, b.source, b.value) for k, b in sorted(s.bindings)) for s in m.candidate.steps)
        names = tuple(s.kind.name for s in m.candidate.steps)
        out.append((names, m.support, m.success_rate, plan, m.candidate.parameters))
    return out


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(corpus_strategy, st.integers(2, 4), st.sampled_from([0.0, 0.5, 0.6, 1.0]), st.integers(2, 4))
def test_miner_matches_brute_force(spec, min_support, min_success, max_len):
    corpus = _build(spec)
    expected = brute_force_mine(corpus, min_support, min_success, max_len,
                                lambda task_id, rec: rec.outcome.status is OutcomeStatus.SUCCESS)
    assert _render(mine_composites(corpus, min_support, min_success, max_len)) == expected


# --- skills -----------------------------------------------------------------


def test_distill_skill_from_successful_episode():
    traj = _search_extract("alan turing", "1912", tail=False)
    ep = Episode(1, 0, 1, "find a birth year", ("search: alan turing", "extract: 1912"), "1912", "x", 5)
    skill = distill_skill(ep, traj.records, "When was alan turing born?",
                          {0: Verdict.FULFILLED, 1: Verdict.FULFILLED})
    assert skill.parameters == ("subject",)
    bindings = [{k: (b.source, b.value) for k, b in s.bindings} for s in skill.steps]
    assert bindings[0] == {"query": ("param", "subject")}
    assert bindings[1]["text"] == ("output", 0)
    assert skill.skill_id.startswith("skill-") and skill.trigger_conditions
    s = store()
    s.commit(make_revision(Target("skill", skill.skill_id), EditKind.ADD_SKILL, {"skill": skill.to_dict()},
                           [("alan turing", 0), ("alan turing", 1)]))
    assert skill.skill_id in s.state.skills
    with pytest.raises(EpisodeNotSuccessful):
        distill_skill(ep, traj.records, "x", {0: Verdict.FULFILLED, 1: Verdict.VIOLATED})


def test_distill_triggers_from_analyzer():
    traj = _search_extract("ada", "1815", tail=False)
    ep = Episode(1, 0, 1, "find a birth year", (), "1815", "x", 5)
    skill = distill_skill(ep, traj.records, "ada", {0: Verdict.FULFILLED, 1: Verdict.PARTIAL},
                          analyzer("TRIGGERS: birth year questions; biography lookups"))
    assert skill.trigger_conditions == ["birth year questions", "biography lookups"]


# --- the cycle --------------------------------------------------------------


def _mixed_corpus():
    corpus = [_search_extract(f"person{i}", str(1900 + i)) for i in range(4)]
    corpus.append(trajectory("zz", [record(i, "search", "missing api key", OutcomeStatus.TOOL_ERROR)
                                    for i in range(3)]))
    return corpus


def test_cycle_is_idempotent_and_provenance_complete():
    corpus = _mixed_corpus()
    s = store()
    first = evolution_cycle(corpus, s, analyzer=status_judge())
    assert first.committed > 0
    assert first.by_kind.get("AddComposite") == 1 and first.by_kind.get("AddFailurePattern") == 1
    state = s.state.dumps()
    second = evolution_cycle(corpus, s, analyzer=status_judge())
    assert second.committed == 0 and s.state.dumps() == state
    steps = {(t.task.task_id, r.step_index) for t in corpus for r in t.records}
    for rev in s.revisions:
        assert rev.provenance and set(map(tuple, rev.provenance)) <= steps
    assert s.replay().dumps() == state


def test_cycle_respects_mine_flag_and_tunes_threshold():
    s = store()
    result = evolution_cycle(_mixed_corpus(), s, EvolutionConfig(mine=False), analyzer=status_judge(),
                             memory_stats=[{"steps": 10, "degraded_steps": 5}], fold_threshold=12)
    assert "AddComposite" not in result.by_kind and result.fold_threshold == 10
    assert tune_fold_threshold(12, 0.1) == 12
    assert tune_fold_threshold(5, 0.9) == 4
