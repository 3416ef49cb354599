import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoagent.backend import ScriptedBackend, ScriptedScenario
from evoagent.cognition import (
    CompositeAction,
    EditKind,
    PlanStep,
    SkillTemplate,
    Target,
    literal,
    make_revision,
    output,
    param,
)
from evoagent.core import ActionVariant, FinalStatus, OutcomeStatus, TaskSpec, serialize_trajectory
from evoagent.decision import (
    Agent,
    MissingRequiredParam,
    ParseError,
    RunConfig,
    Selection,
    UnknownActionName,
    build_action_space,
    execute,
    parse_selection,
    render_select_prompt,
)
from evoagent.emo import MemoryEntry, WorkingMemory
from evoagent.world import PeerSpec, World, tool_from_dict

from _helpers import agent, lookup_world, scripted, sel, store_for, tool_kind

TASK = TaskSpec("t1", "Find the answer.", frozenset({"trivia"}))


def two_tool_world():
    world = lookup_world({"alan turing": "Alan Turing was born in 1912."},
                         [{"name": "extract", "description": "regex match"}])
    world.add_peer(PeerSpec("bob", ("math",), table={"q": "a"}))
    return world


def test_runconfig_defaults_and_validation():
    cfg = RunConfig()
    assert (cfg.max_steps, cfg.embodied_max_steps, cfg.max_generation_tokens, cfg.temperature) == (5, 50, 1024, 0.7)
    with pytest.raises(ValueError):
        RunConfig(max_steps=0)
    with pytest.raises(ValueError):
        RunConfig(temperature=2.5)


def test_action_space_minimum_and_counting():
    empty = World()
    names = [d.name for d in build_action_space(store_for(empty).state, empty)]
    assert names == ["Generate", "FinalAnswer"]
    world = two_tool_world()
    space = build_action_space(store_for(world, [{"peer_id": "bob"}]).state, world)
    assert [d.name for d in space] == ["Generate", "extract", "lookup", "Ask:bob", "Delegate:bob", "FinalAnswer"]


def test_committed_composite_grows_space_by_one():
    world = two_tool_world()
    store = store_for(world, [{"peer_id": "bob"}])
    before = len(build_action_space(store.state, world))
    comp = CompositeAction("lookup-then-extract", "find then cut", (
        PlanStep(tool_kind("lookup"), (("query", param("query")),)),
        PlanStep(tool_kind("extract"), (("text", output(0)), ("pattern", literal(r"(\d{4})")))),
    ), parameters=("query",))
    store.commit(make_revision(Target("composite", comp.composite_id), EditKind.ADD_COMPOSITE,
                               {"composite": comp.to_dict()}, [("t", 0)]))
    space = build_action_space(store.state, world)
    assert len(space) == before + 1
    assert {d.version for d in space} == {store.version}


def test_prompt_sections_and_determinism():
    world = two_tool_world()
    space = build_action_space(store_for(world, [{"peer_id": "bob"}]).state, world)
    empty = WorkingMemory((), 0, 100)
    p1 = render_select_prompt(TASK, empty, space)
    assert p1 == render_select_prompt(TASK, empty, space)
    heads = [p1.index(h) for h in ("# Task", "# Working memory", "# Actions", "# Output")]
    assert heads == sorted(heads)
    assert "# Working memory\nno prior steps" in p1
    assert p1.rstrip().endswith("ACTION: <name>; PARAMS: <name=value; ...>; INTENTION: <one line>")
    entries = tuple(MemoryEntry(k, i, lbl, f"text {i}", 2, i) for i, (k, lbl) in enumerate(
        [("episode", "episode 1 | steps 0-1"), ("summary", "step 2 | summary"), ("raw", "step 3 | raw")]))
    p2 = render_select_prompt(TASK, WorkingMemory(entries, 6, 100), space)
    spots = [p2.index(f"[{e.label}]\ntext {e.position}") for e in entries]
    assert spots == sorted(spots)


def test_parse_examples():
    world = two_tool_world()
    space = build_action_space(store_for(world, [{"peer_id": "bob"}]).state, world)
    s = parse_selection("thinking...\nACTION: lookup; PARAMS: query=alan turing; INTENTION: find birth year", space)
    assert s.chosen.name == "lookup" and dict(s.parameters) == {"query": "alan turing"}
    assert s.intention == "find birth year"
    with pytest.raises(UnknownActionName):
        parse_selection("ACTION: teleport; PARAMS: ; INTENTION: go", space)
    with pytest.raises(MissingRequiredParam):
        parse_selection("ACTION: lookup; PARAMS: ; INTENTION: go", space)
    with pytest.raises(ParseError):
        parse_selection("ACTION: lookup; PARAMS: query=a; bogus=b; INTENTION: go", space)
    with pytest.raises(ParseError):
        parse_selection("ACTION: lookup; PARAMS: query=a; query=b; INTENTION: go", space)
    with pytest.raises(ParseError):
        parse_selection("I would search", space)
    # the last ACTION line wins
    s = parse_selection("ACTION: Generate; PARAMS: prompt=x; INTENTION: a\nACTION: FinalAnswer; PARAMS: answer=7; "
                        "INTENTION: b", space)
    assert s.chosen.name == "FinalAnswer"


@settings(max_examples=300)
@given(st.binary(max_size=200))
def test_parse_never_crashes(data):
    world = two_tool_world()
    space = build_action_space(store_for(world, [{"peer_id": "bob"}]).state, world)
    try:
        s = parse_selection(data, space)
    except ParseError:
        return
    assert isinstance(s, Selection) and s.chosen in space


def _select(space, name, **params):
    return Selection(next(d for d in space if d.name == name), params, "x")


def test_execute_final_and_composite_semantics():
    world = lookup_world({"alan turing": "Alan Turing was born in 1912."},
                         [{"name": "extract", "description": "regex match"}])
    store = store_for(world)
    flow = CompositeAction("c-flow", "g", (
        PlanStep(tool_kind("lookup"), (("query", param("query")),)),
        PlanStep(tool_kind("extract"), (("text", output(0)), ("pattern", literal(r"(\d{4})")))),
    ), parameters=("query",))
    failing = CompositeAction("c-fail", "g", (
        PlanStep(tool_kind("lookup"), (("query", literal("alan turing")),)),
        PlanStep(tool_kind("lookup"), (("query", literal("nobody")),)),
        PlanStep(tool_kind("extract"), (("text", output(1)), ("pattern", literal("x")))),
    ))
    for comp in (flow, failing):
        store.commit(make_revision(Target("composite", comp.composite_id), EditKind.ADD_COMPOSITE,
                                   {"composite": comp.to_dict()}, [("t", 0)]))
    space = build_action_space(store.state, world)
    backend = ScriptedBackend()

    out, done = execute(_select(space, "FinalAnswer", answer="42"), world, backend, store.state)
    assert done and out.status is OutcomeStatus.SUCCESS and out.payload == "42"

    out, done = execute(_select(space, "c-flow", query="alan turing"), world, backend, store.state)
    assert not done and out.payload == "1912"

    clock = world.clock
    out, _ = execute(_select(space, "c-fail"), world, backend, store.state)
    assert out.status is OutcomeStatus.TOOL_ERROR
    assert "sub-step 1 (lookup)" in out.error_detail
    assert world.clock - clock == 2  # step 2 never ran


def test_extract_receives_search_payload_verbatim():
    seen = {}
    world = lookup_world({"q": "payload; with odd: chars"})
    world.add_tool(tool_from_dict({"name": "extract", "description": "regex"}))
    original = world.tools["extract"].handler

    def spy(params, w):
        seen.update(params)
        return original(params, w)

    world.tools["extract"] = world.tools["extract"].__class__(**{**world.tools["extract"].__dict__, "handler": spy})
    store = store_for(world)
    comp = CompositeAction("c", "g", (PlanStep(tool_kind("lookup"), (("query", literal("q")),)),
                                      PlanStep(tool_kind("extract"), (("text", output(0)), ("pattern", literal("odd"))))))
    store.commit(make_revision(Target("composite", "c"), EditKind.ADD_COMPOSITE, {"composite": comp.to_dict()},
                               [("t", 0)]))
    execute(_select(build_action_space(store.state, world), "c"), world, ScriptedBackend(), store.state)
    assert seen["text"] == "payload; with odd: chars"


def test_skill_template_runs_one_generation():
    world = World()
    store = store_for(world)
    skill = SkillTemplate("summarize", "summarize a topic", ["long text"], "Summarize {topic} briefly.",
                          parameters=("topic",))
    store.commit(make_revision(Target("skill", "summarize"), EditKind.ADD_SKILL, {"skill": skill.to_dict()},
                               [("t", 0)]))
    space = build_action_space(store.state, world)
    backend = ScriptedBackend(ScriptedScenario.from_dict({"policies": {"generate": "echo"}}))
    out, _ = execute(_select(space, "summarize", topic="tides"), world, backend, store.state)
    assert out.payload == "Summarize tides briefly."


def test_loop_solves_at_step_zero():
    a = agent(lookup_world(), scripted([sel("FinalAnswer", answer="42")]))
    traj = a.run(TASK)
    assert len(traj) == 1 and traj.final_status is FinalStatus.SOLVED and traj.final_answer == "42"


def test_loop_cap_and_counts():
    backend = scripted(policies={"select": "think_forever", "generate": "echo", "compress": "extractive",
                                 "selector": "recent_raw", "fold": "digest"})
    a = agent(lookup_world(), backend)
    traj = a.run(TASK)
    assert len(traj) == 5 and traj.final_status is FinalStatus.CAP_HIT
    assert len(a.pool) == len(traj)
    assert len(set(a.pinned_versions)) == 1


def test_repair_then_recorded_parse_error():
    backend = scripted([
        "nonsense", sel("lookup", query="q"),          # repaired on the second try
        "still nonsense", "ACTION: teleport; PARAMS: ; INTENTION: x",  # two failures: ParseError step
        sel("FinalAnswer", answer="answer"),
    ])
    traj = agent(lookup_world(), backend).run(TASK)
    assert [r.outcome.status for r in traj.records] == [OutcomeStatus.SUCCESS, OutcomeStatus.PARSE_ERROR,
                                                        OutcomeStatus.SUCCESS]
    bad = traj.records[1]
    assert bad.kind.variant is ActionVariant.EMIC_GENERATE and "teleport" in bad.outcome.error_detail
    assert traj.final_status is FinalStatus.SOLVED


def test_loop_is_deterministic():
    def once():
        backend = scripted([sel("lookup", query="q"), sel("Generate", prompt="p"), sel("FinalAnswer", answer="a")])
        return serialize_trajectory(agent(lookup_world(), backend).run(TASK))
    assert once() == once()


def test_trace_stream_phases():
    lines = []
    a = agent(lookup_world(), scripted([sel("FinalAnswer", answer="a")]))
    a.trace = lines.append
    a.run(TASK)
    assert [ln.split()[0] for ln in lines] == ["SELECT", "EXECUTE", "UPDATE"]


def test_embodied_cap_is_fifty():
    backend = scripted(policies={"select": "think_forever", "generate": "echo", "compress": "extractive",
                                 "selector": "recent_raw", "fold": "digest"})
    traj = agent(World(), backend).run(TaskSpec("e", "explore", frozenset({"embodied"})))
    assert len(traj) == 50 and traj.final_status is FinalStatus.CAP_HIT


def test_delegation_depth_cap_becomes_outcome():
    inner = World()
    world = World(delegation_cap=1)

    def peer(task, depth):
        sub = Agent(store_for(inner), World(delegation_cap=1), scripted([sel("FinalAnswer", answer="done")]),
                    RunConfig(), depth=depth)
        return sub.run(task)

    world.add_peer(PeerSpec("helper", (), agent=peer))
    a = Agent(store_for(world, [{"peer_id": "helper"}]), world,
              scripted([sel("Delegate:helper", task="do it"), sel("FinalAnswer", answer="ok")]), RunConfig(), depth=1)
    traj = a.run(TASK)
    assert traj.records[0].outcome.status is OutcomeStatus.CAP_EXCEEDED
    assert traj.final_status is FinalStatus.SOLVED
