import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from evoagent.backend import ScriptedBackend, ScriptedScenario
from evoagent.core import OutcomeStatus, token_count
from evoagent.emo import (
    BudgetTooSmall,
    MemoryPool,
    RangeOverlap,
    RangeTooShort,
    Representation,
    SelectorDecision,
    WorkingMemory,
    assemble_working_memory,
    auto_fold_range,
    heuristic_decision,
    ingest_step,
    mem_fold,
    parse_selector_output,
    retrieve_episodes,
    select_representations,
)

from _helpers import record

WORDS = "alpha beta gamma delta sensor value key door lamp code 42 1912 reading hall".split()
REPS = [Representation.RAW, Representation.SUMMARY, Representation.OMIT]


def digest_backend():
    return ScriptedBackend(ScriptedScenario.from_dict({"policies": {"fold": "digest", "compress": "extractive"}}))


def random_record(rng: random.Random, i: int):
    payload = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 60)))
    status = rng.choice([OutcomeStatus.SUCCESS, OutcomeStatus.SUCCESS, OutcomeStatus.TOOL_ERROR])
    return record(i, rng.choice(["lookup", "reading", "calc"]), payload, status,
                  {"q": rng.choice(WORDS)}, intention=" ".join(rng.choice(WORDS) for _ in range(4)))


def random_pool(rng: random.Random, n: int, fold_prob: float = 0.1, backend=None) -> MemoryPool:
    pool = MemoryPool()
    for i in range(n):
        ingest_step(pool, random_record(rng, i), backend)
        if rng.random() < fold_prob:
            rng_fold(pool, rng, backend)
    return pool


def rng_fold(pool, rng, backend=None):
    unfolded = pool.unfolded()
    runs, cur = [], []
    for i in unfolded:
        if cur and i != cur[-1] + 1:
            runs.append(cur)
            cur = []
        cur.append(i)
    if cur:
        runs.append(cur)
    runs = [r for r in runs if len(r) >= 2]
    if not runs:
        return None
    run = rng.choice(runs)
    a = rng.randrange(0, len(run) - 1)
    b = rng.randrange(a + 1, len(run))
    return mem_fold(pool, run[a], run[b], backend)


def random_decision(pool, rng, allow_omit=True) -> SelectorDecision:
    reps = REPS if allow_omit else REPS[:2]
    return SelectorDecision({i: rng.choice(reps) for i in pool.unfolded()})


def minimal_budget(pool, decision) -> int:
    newest = len(pool) - 1
    ep = pool.episode_for(newest)
    if ep is not None:
        return ep.episode_tokens
    if decision.per_step[newest] is Representation.OMIT:
        return 1
    return pool.summary(newest).summary_tokens


def check_budget_law(seed: int, extra: int) -> None:
    rng = random.Random(seed)
    pool = random_pool(rng, rng.randint(1, 200), fold_prob=rng.choice([0.0, 0.05, 0.2]))
    decision = random_decision(pool, rng)
    budget = minimal_budget(pool, decision) + extra
    wm = assemble_working_memory(pool, decision, budget)
    assert wm.total_tokens <= budget
    assert wm.total_tokens == sum(e.tokens for e in wm.entries)
    positions = [e.position for e in wm.entries]
    assert positions == sorted(positions)


@settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**32), st.integers(0, 3000))
def test_budget_law_property(seed, extra):
    check_budget_law(seed, extra)


def test_budget_too_small():
    pool = MemoryPool()
    ingest_step(pool, record(0, payload="a b c d e f g h i j k l m n o p"), None)
    decision = heuristic_decision(pool)
    floor = pool.summary(0).summary_tokens
    with pytest.raises(BudgetTooSmall):
        assemble_working_memory(pool, decision, floor - 1)
    assert assemble_working_memory(pool, decision, floor).total_tokens <= floor


def test_degradation_demotes_then_drops_oldest_first():
    pool = MemoryPool()
    for i in range(4):
        ingest_step(pool, record(i, payload=" ".join(["word"] * 40)), None)
    decision = SelectorDecision({i: Representation.RAW for i in range(4)})
    full = assemble_working_memory(pool, decision, 10_000)
    assert [e.kind for e in full.entries] == ["raw"] * 4 and not full.degraded
    tight = assemble_working_memory(pool, decision, full.total_tokens - 1)
    assert tight.degraded
    assert tight.entries[0].kind == "summary" and tight.entries[-1].kind == "raw"


def test_lossless_retention_under_random_operations():
    rng = random.Random(7)
    pool = MemoryPool()
    originals = []
    ops = 0
    while ops < 300:
        if rng.random() < 0.75 or len(pool) < 2:
            rec = random_record(rng, len(pool))
            ingest_step(pool, rec, None)
            originals.append(rec)
        else:
            rng_fold(pool, rng, digest_backend() if rng.random() < 0.5 else None)
        ops += 1
    assert len(pool.episodes) > 5
    for rec in originals:
        stored = pool.record(rec.step_index)
        assert stored.outcome == rec.outcome and stored.parameters == rec.parameters
        assert stored.raw_text.endswith("payload: " + rec.outcome.payload)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.booleans())
def test_fold_strictly_shrinks_assembly(seed, use_summarizer):
    rng = random.Random(seed)
    backend = digest_backend() if use_summarizer else None
    pool = random_pool(rng, rng.randint(2, 60), fold_prob=0.05, backend=backend)
    decision = random_decision(pool, rng, allow_omit=False)
    before = assemble_working_memory(pool, decision, 10**9).total_tokens
    ep = rng_fold(pool, rng, backend)
    if ep is None:
        return
    after = assemble_working_memory(pool, decision.restricted_to(pool.unfolded()), 10**9).total_tokens
    assert after < before


def test_summary_never_longer_than_raw():
    long_answer = ScriptedBackend(ScriptedScenario(site_defaults={"compress": "word " * 500}))
    pool = MemoryPool()
    s = ingest_step(pool, record(0, payload="short"), long_answer)
    assert s.summary_tokens <= pool.record(0).raw_tokens
    assert pool.compressor_fallbacks == 1


def test_selector_parsing():
    pool = MemoryPool()
    for i in range(4):
        ingest_step(pool, record(i), None)
    d = parse_selector_output("0:Raw, 1:Omit, 2:Summary, 3:Raw; FOLD 2-3", pool)
    assert d.per_step == {0: Representation.RAW, 1: Representation.OMIT, 2: Representation.SUMMARY,
                          3: Representation.RAW}
    assert d.fold_directive == (2, 3)
    flags = parse_selector_output("0:True,1:False,2:None", pool).per_step  # True means "compressed"
    assert [flags[i] for i in range(3)] == [Representation.SUMMARY, Representation.RAW, Representation.OMIT]
    partial = parse_selector_output("0:Omit", pool)
    assert partial.per_step[0] is Representation.OMIT and partial.per_step[3] is Representation.RAW
    assert parse_selector_output("0:Omit, 1:Raw; FOLD 0-1", pool).fold_directive is None  # covers an Omit
    assert parse_selector_output("utter nonsense", pool) is None
    garbage = ScriptedBackend(ScriptedScenario(site_defaults={"selector": "???"}))
    assert select_representations(pool, "ctx", garbage).from_fallback


def test_fold_range_errors_and_auto_fold():
    pool = MemoryPool()
    for i in range(14):
        ingest_step(pool, record(i), None)
    assert auto_fold_range(pool, 12) == (0, 6)
    with pytest.raises(RangeTooShort):
        mem_fold(pool, 3, 3, None)
    mem_fold(pool, 0, 6, None)
    with pytest.raises(RangeOverlap):
        mem_fold(pool, 5, 8, None)
    assert auto_fold_range(pool, 12) is None
    assert pool.unfolded() == list(range(7, 14))


def test_episode_from_summarizer_and_retrieval():
    pool = MemoryPool()
    ingest_step(pool, record(0, payload="reading k1: 1234 units"), digest_backend())
    ingest_step(pool, record(1, payload="reading k2: 999 units"), digest_backend())
    ingest_step(pool, record(2, payload="door opened to the hall"), None)
    ingest_step(pool, record(3, payload="lamp lit in the hall"), None)
    e1 = mem_fold(pool, 0, 1, digest_backend())
    assert "k1: 1234" in e1.text and e1.key_actions
    assert e1.episode_tokens < pool.summary(0).summary_tokens + pool.summary(1).summary_tokens
    e2 = mem_fold(pool, 2, 3, None)
    assert [e.episode_id for e in retrieve_episodes(pool, "hall door", 5)] == [e2.episode_id]
    assert retrieve_episodes(pool, "zebra", 5) == []


def test_empty_memory_renders_placeholder():
    assert WorkingMemory((), 0, 100).render() == "no prior steps"
    assert token_count("no prior steps") > 0
