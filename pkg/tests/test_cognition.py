import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoagent.cognition import (
    CognitionStore,
    CompositeAction,
    EditKind,
    NotValidated,
    PlanStep,
    Target,
    UnknownAction,
    estimate,
    literal,
    make_revision,
    output,
    param,
    query_action_knowledge,
    reliability_update,
    render_knowledge,
    seed_state,
)
from evoagent.core import ActionKind, ActionVariant, Outcome, OutcomeStatus

from _helpers import tool_kind

SEED_TOOLS = [{"name": "search", "description": "web search"}, {"name": "extract", "description": "regex match"}]
SEED_PEERS = [{"peer_id": "bob", "expertise": {"math": "arithmetic"}}]


def fresh() -> CognitionStore:
    return CognitionStore(seed_state(tools=SEED_TOOLS, peers=SEED_PEERS))


def adjust(store, name="search", ok=True, ref=("t", 0), tags=("trivia",)):
    out = Outcome.success("x") if ok else Outcome.error(OutcomeStatus.TOOL_ERROR, "boom")
    return reliability_update(store, name, list(tags), out, [ref])


def test_estimate_is_laplace_smoothed():
    assert estimate(0, 0) == 0.5
    assert estimate(1, 1) == pytest.approx(2 / 3)
    assert estimate(0, 2) == pytest.approx(0.25)


def test_render_shows_counts_and_estimate():
    store = fresh()
    assert "reliability: 0/0 on tag trivia (estimate 0.500)" in render_knowledge(store.state, "search", ["trivia"])
    store.commit(adjust(store))
    assert store.version == 1
    assert "reliability: 1/1 on tag trivia (estimate 0.667)" in render_knowledge(store.state, "search", ["trivia"])


def test_duplicate_evidence_is_rejected():
    store = fresh()
    rev = adjust(store)
    store.commit(rev)
    again = adjust(store)
    verdict = store.validate(again)
    assert not verdict.ok and "duplicate" in verdict.reason
    with pytest.raises(NotValidated):
        store.commit(again)
    # different evidence is fine
    assert store.validate(adjust(store, ref=("t", 1))).ok


def test_validation_rules():
    store = fresh()
    tool = Target("tool", "search")
    assert not store.validate(make_revision(tool, EditKind.ADD_FAILURE_PATTERN, {"text": "x"}, [])).ok
    assert not store.validate(make_revision(Target("tool", "nope"), EditKind.ADD_FAILURE_PATTERN,
                                            {"text": "x"}, [("t", 0)])).ok
    assert not store.validate(make_revision(Target("peer", "bob"), EditKind.ADD_FAILURE_PATTERN,
                                            {"text": "x"}, [("t", 0)])).ok
    assert not store.validate(make_revision(tool, EditKind.ADD_FAILURE_PATTERN, {"text": "  "}, [("t", 0)])).ok
    store.commit(make_revision(tool, EditKind.ADD_FAILURE_PATTERN, {"text": "Missing API key"}, [("t", 0)]))
    dup = make_revision(tool, EditKind.ADD_FAILURE_PATTERN, {"text": "missing  api key"}, [("t", 1)])
    assert store.validate(dup).reason == "duplicate text"


def test_amend_description_archives_previous():
    store = fresh()
    rev = make_revision(Target("tool", "search"), EditKind.AMEND_DESCRIPTION, {"text": "web search, English only"},
                        [("t", 0)])
    store.commit(rev)
    assert store.state.tools["search"].description == "web search, English only"
    assert store.revisions[-1].payload["previous"] == "web search"
    assert store.revisions[-1].committed


def _composite(cid, steps, params=()):
    return make_revision(Target("composite", cid), EditKind.ADD_COMPOSITE,
                         {"composite": CompositeAction(cid, "goal", tuple(steps), parameters=tuple(params)).to_dict()},
                         [("t", 0)])


def test_composite_validation():
    store = fresh()
    good = _composite("search-then-extract", [
        PlanStep(tool_kind("search"), (("query", param("query")),)),
        PlanStep(tool_kind("extract"), (("text", output(0)), ("pattern", literal("(\\d+)")))),
    ], ["query"])
    assert store.validate(good).ok
    backward = _composite("bad", [PlanStep(tool_kind("search"), (("query", output(0)),))])
    assert "non-forward" in store.validate(backward).reason
    undeclared = _composite("bad2", [PlanStep(tool_kind("search"), (("query", param("q")),))])
    assert "undeclared" in store.validate(undeclared).reason
    unknown = _composite("bad3", [PlanStep(tool_kind("fly"), ())])
    assert "unknown tool" in store.validate(unknown).reason
    store.commit(good)
    assert "duplicate" in store.validate(good.__class__(**{**good.__dict__, "revision_id": "x"})).reason


def test_knowledge_query_is_sorted_and_strict():
    state = fresh().state
    assert list(query_action_knowledge(state, ["search", "bob", "extract"])) == ["bob", "extract", "search"]
    with pytest.raises(UnknownAction):
        query_action_knowledge(state, ["nope"])


def test_save_load_and_versions(tmp_path):
    store = fresh()
    for i in range(4):
        store.commit(adjust(store, ok=i % 2 == 0, ref=("t", i)))
    path = tmp_path / "cog.jsonl"
    store.save(path)
    loaded = CognitionStore.load(path)
    assert loaded.state.dumps() == store.state.dumps()
    assert store.at_version(2).state.dumps() == store.replay(2).dumps()
    assert store.at_version(2).version == 2


revision_specs = st.lists(
    st.tuples(st.sampled_from(["adjust", "pattern", "example", "peer", "precondition"]),
              st.sampled_from(["search", "extract"]), st.integers(0, 5), st.booleans()),
    max_size=25)


@settings(max_examples=100)
@given(revision_specs)
def test_replay_reproduces_live_state(specs):
    store = fresh()
    for kind, tool, n, flag in specs:
        ref = ("task", n)
        if kind == "adjust":
            rev = adjust(store, tool, flag, ref)
        elif kind == "pattern":
            rev = make_revision(Target("tool", tool), EditKind.ADD_FAILURE_PATTERN, {"text": f"fails {n}"}, [ref])
        elif kind == "example":
            rev = make_revision(Target("tool", tool), EditKind.ADD_EXAMPLE,
                                {"parameters": {"q": str(n)}, "outcome": f"out {n}"}, [ref])
        elif kind == "peer":
            rev = make_revision(Target("peer", "bob"), EditKind.AMEND_PEER_EXPERTISE,
                                {"tag": "math", "text": f"level {n}"}, [ref])
        else:
            rev = make_revision(Target("tool", tool), EditKind.ADD_PRECONDITION, {"text": f"needs {n}"}, [ref])
        if store.validate(rev).ok:
            store.commit(rev)
    assert store.replay().dumps() == store.state.dumps()
    assert store.state.version == len(store.revisions)


def test_pinned_snapshot_is_not_mutated_by_commits():
    store = fresh()
    pinned = store.pin()
    before = pinned.dumps()
    store.commit(adjust(store))
    assert pinned.dumps() == before
    assert store.pin().version == pinned.version + 1


def test_peer_kinds_render():
    state = fresh().state
    text = render_knowledge(state, "bob", ["math"])
    assert "- math: arithmetic" in text
    assert ActionKind(ActionVariant.ETIC_ASK, "bob").name == "Ask:bob"
