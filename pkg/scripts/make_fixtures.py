"""Regenerate the bundled scenarios under src/evoagent/scenarios/.

Each scenario directory holds config.json, scenario.json and tasks.jsonl.
Run from the repository root: python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import json
from pathlib import Path

from evoagent.core import write_jsonl
from evoagent.world import reading_value

ROOT = Path(__file__).resolve().parents[1] / "src" / "evoagent" / "scenarios"

MEMORY_POLICIES = {"compress": "extractive", "selector": "recent_raw", "fold": "digest", "generate": "echo"}
ANALYZER = {"policies": {"align": "status_judge"}}


def sel(action: str, intention: str, **params: str) -> str:
    args = "; ".join(f"{k}={v}" for k, v in params.items())
    return f"ACTION: {action}; PARAMS: {args}; INTENTION: {intention}"


def task(task_id, instruction, tags=(), gold=None, reference=None) -> dict:
    return {"task_id": task_id, "instruction": instruction, "domain_tags": sorted(tags),
            "reference_path": reference, "gold_answer": gold}


def write(name: str, config: dict, scenario: dict, tasks: list[dict]) -> None:
    d = ROOT / name
    d.mkdir(parents=True, exist_ok=True)
    scenario = {"name": name, **scenario}
    (d / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (d / "scenario.json").write_text(json.dumps(scenario, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_jsonl(d / "tasks.jsonl", tasks)
    print(f"{name}: {len(tasks)} tasks")


def scripted(entries: list[str], **extra) -> dict:
    return {"entries": {"select": entries}, "policies": dict(MEMORY_POLICIES), **extra}


SEARCH_DESC = "web search: returns a short factual snippet for a question"


def qa_basic() -> None:
    table = {"capital of france": "Paris is the capital of France."}
    tools = [
        {"name": "web_search", "handler": "lookup", "description": SEARCH_DESC, "table": table},
        {"name": "calculator", "handler": "calculator", "description": "evaluates an arithmetic expression"},
    ]
    scripts = {
        "qa-1": scripted([sel("web_search", "find the capital", query="capital of France"),
                          sel("FinalAnswer", "report the city", answer="Paris")]),
        "qa-2": scripted([sel("calculator", "multiply", expression="17*23"),
                          sel("FinalAnswer", "report the product", answer="391")]),
        # answers without checking, and gets it wrong
        "qa-3": scripted([sel("FinalAnswer", "guess the year", answer="1900")]),
    }
    tasks = [task("qa-1", "What is the capital of France?", ["geography"], "Paris"),
             task("qa-2", "What is 17 times 23?", ["math"], "391"),
             task("qa-3", "In which year was the Eiffel Tower completed?", ["history"], "1889")]
    write("qa_basic", {"seed": 11, "memory_budget": 2048},
          {"tools": tools, "scripts": scripts, "analyzer": ANALYZER}, tasks)


def tool_instability() -> None:
    questions = {f"what is the code word for item {i}": f"code word {i}: {w}"
                 for i, w in enumerate((f"{a}{b}" for a in ("amber", "basil", "cedar", "delta", "ember")
                                        for b in ("fox", "gull", "hare", "ibis", "jay", "kite", "lynx", "mole",
                                                  "newt", "owl")))}
    tools = [
        {"name": "web_search_1", "handler": "lookup", "description": SEARCH_DESC, "table": questions,
         "failure_probability": 0.5, "failure_seed": 20240501},
        {"name": "web_search_2", "handler": "lookup", "description": SEARCH_DESC, "table": questions},
    ]
    tasks = [task(f"inst-{i:02d}", q[0].upper() + q[1:] + "?", ["trivia"], a)
             for i, (q, a) in enumerate(questions.items())]
    script = {"policies": {"select": "reliability_greedy", **MEMORY_POLICIES}}
    write("tool_instability", {"seed": 5, "memory_budget": 2048, "evolution": {"mine": False}},
          {"tools": tools, "script": script, "analyzer": ANALYZER}, tasks)


def emo_suite(n_tasks: int = 4, n_keys: int = 29) -> None:
    tools = [{"name": "reading", "handler": "reading",
              "description": "returns the full sensor log for one key; the value is in the first sentence"}]
    tasks = []
    for t in range(n_tasks):
        keys = [f"t{t}s{i:02d}" for i in range(n_keys)]
        gold = str(sum(reading_value(k) for k in keys))
        tasks.append(task(f"emo-{t}", f"Take one reading for each of these keys: {' '.join(keys)}. "
                                      f"Then report the total of all readings.", ["sensors"], gold))
    script = {"policies": {"select": "sweep", **MEMORY_POLICIES}}
    write("emo_suite", {"seed": 3, "memory_budget": 1600, "max_steps": n_keys + 1},
          {"tools": tools, "script": script, "analyzer": ANALYZER}, tasks)


MINI_ENV = {"rooms": ["hall", "kitchen", "study", "vault"],
            "connections": [["hall", "kitchen"], ["hall", "study"], ["hall", "vault"]],
            "objects": {"key": "kitchen", "lamp": "study"},
            "start": "hall", "goal": {"object": "key", "room": "vault"}}
REFERENCE_PATH = ["look", "go", "take", "go", "go", "put"]


def minienv() -> None:
    tools = [
        {"name": "look", "description": "describe the current room, its exits and objects"},
        {"name": "go", "description": "move through a door to a neighbouring room"},
        {"name": "take", "description": "pick up an object in the current room"},
        {"name": "put", "description": "put a held object down in the current room"},
    ]
    reference = [
        sel("look", "see where I am"),
        sel("go", "reach the key", room="kitchen"),
        sel("take", "pick up the key", object="key"),
        sel("go", "head back to the hall", room="hall"),
        sel("go", "enter the vault", room="vault"),
        sel("put", "leave the key in the vault", object="key", room="vault"),
        sel("FinalAnswer", "report completion", answer="the key is in the vault"),
    ]
    tasks = [task("env-ref", "Bring the key to the vault.", ["embodied"], None, REFERENCE_PATH)]
    write("minienv", {"seed": 1, "memory_budget": 2048},
          {"tools": tools, "env": MINI_ENV, "scripts": {"env-ref": scripted(reference)}, "analyzer": ANALYZER},
          tasks)


def stall() -> None:
    tools = [{"name": "look", "description": "describe the current room, its exits and objects"}]
    script = {"policies": {"select": "think_forever", **MEMORY_POLICIES}}
    tasks = [task("stall-standard", "Decide what to do about the weather.", ["chat"]),
             task("stall-embodied", "Explore until told to stop.", ["embodied"])]
    write("stall", {"seed": 2, "memory_budget": 2048},
          {"tools": tools, "env": MINI_ENV, "script": script, "analyzer": ANALYZER}, tasks)


def delegation() -> None:
    oracle_table = {f"what is {a} plus {b}": str(a + b) for a, b in ((2, 3), (10, 7), (40, 2))}
    helper = {
        "tools": [{"name": "calculator", "handler": "calculator", "description": "evaluates an arithmetic expression"}],
        "script": scripted([sel("calculator", "compute it", expression="6*7"),
                            sel("FinalAnswer", "report the product", answer="42")]),
        "run": {"max_steps": 3},
    }
    peers = [
        {"peer_id": "oracle", "expertise": {"math": "answers small arithmetic questions"}, "table": oracle_table},
        {"peer_id": "helper", "expertise": {"math": "works out calculations with its own calculator"},
         "agent": helper},
    ]
    scripts = {}
    tasks = []
    for i, (q, a) in enumerate(oracle_table.items()):
        tid = f"ask-{i}"
        scripts[tid] = scripted([sel("Ask:oracle", "ask the expert", question=q),
                                 sel("FinalAnswer", "relay the answer", answer=a)])
        tasks.append(task(tid, q[0].upper() + q[1:] + "?", ["math"], a))
    scripts["delegate-0"] = scripted([sel("Delegate:helper", "hand the calculation over", task="compute 6*7"),
                                      sel("FinalAnswer", "relay the result", answer="42")])
    tasks.append(task("delegate-0", "What is 6 times 7?", ["math"], "42"))
    write("delegation", {"seed": 9, "memory_budget": 2048},
          {"tools": [], "peers": peers, "scripts": scripts, "analyzer": ANALYZER}, tasks)


def composite_pipeline() -> None:
    people = {"alan turing": "1912", "ada lovelace": "1815", "grace hopper": "1906",
              "john von neumann": "1903", "emmy noether": "1882"}
    table = {f"{name} birth": f"{name.title()} was born in {year}." for name, year in people.items()}
    tools = [
        {"name": "web_search", "handler": "lookup", "description": SEARCH_DESC, "table": table},
        {"name": "extract", "handler": "extract", "description": "returns the first regex match in a text"},
    ]
    scripts = {}
    tasks = []
    for i, (name, year) in enumerate(people.items()):
        tid = f"pipe-{i}"
        snippet = table[f"{name} birth"]
        scripts[tid] = scripted([sel("web_search", "find the birth record", query=f"{name} birth"),
                                 sel("extract", "pull out the year", text=snippet, pattern=r"(\d{4})"),
                                 sel("FinalAnswer", "report the year", answer=year)])
        tasks.append(task(tid, f"In which year was {name} born?", ["biography"], year))
    write("composite_pipeline", {"seed": 4, "memory_budget": 2048},
          {"tools": tools, "scripts": scripts, "analyzer": ANALYZER}, tasks)


def main() -> None:
    qa_basic()
    tool_instability()
    emo_suite()
    minienv()
    stall()
    delegation()
    composite_pipeline()


if __name__ == "__main__":
    main()
