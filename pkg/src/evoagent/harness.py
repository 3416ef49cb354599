"""Configuration, runs, replay, metrics and the two ablations."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .backend import Backend, HTTPBackend, HTTPConfig, ScriptedBackend, ScriptedScenario
from .cognition import CognitionState, CognitionStore, estimate, seed_state
from .core import (
    FORMAT_VERSION,
    ActionVariant,
    FinalStatus,
    OutcomeStatus,
    TaskSpec,
    Trajectory,
    dumps_line,
    read_jsonl,
    serialize_trajectory,
    deserialize_trajectory,
    write_jsonl,
)
from .decision import Agent, RunConfig
from .evolution import EvolutionConfig, EvolutionResult, evolution_cycle, load_corpus
from .world import MiniEnv, fnv1a64, replay_affordances, world_from_scenario

log = logging.getLogger(__name__)

AFFORDANCES = ("go", "look", "take", "put")


class ConfigError(ValueError):
    def __init__(self, key_path: str, reason: str):
        super().__init__(f"{key_path}: {reason}")
        self.key_path = key_path
        self.reason = reason


class MissingReferencePath(ValueError):
    pass


# --- configuration ----------------------------------------------------------

REQUIRED_KEYS = ("seed", "memory_budget")
_RUN_KEYS = set(RunConfig.field_names())
_TOP_KEYS = _RUN_KEYS | {"backend", "parallel_workers", "evolution"}


@dataclass(frozen=True)
class HarnessConfig:
    run: RunConfig
    backend: Mapping[str, Any] = field(default_factory=lambda: {"kind": "scripted"})
    parallel_workers: int = 1
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    raw: Mapping[str, Any] = field(default_factory=dict)


def load_config(source: str | Path | Mapping) -> HarnessConfig:
    """Parse a config file or mapping; problems raise ConfigError naming the key."""
    if isinstance(source, Mapping):
        d = dict(source)
    else:
        try:
            d = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON ({exc.msg})") from None
        if not isinstance(d, dict):
            raise ConfigError("<file>", "expected a JSON object")
    for key in REQUIRED_KEYS:
        if key not in d:
            raise ConfigError(key, "missing required key")
    for key in d:
        if key not in _TOP_KEYS:
            raise ConfigError(key, "unknown key")

    run_kwargs = {k: d[k] for k in _RUN_KEYS if k in d}
    for k in ("seed", "memory_budget", "max_steps", "embodied_max_steps", "max_generation_tokens",
              "fold_threshold", "delegation_cap"):
        if k in run_kwargs and (not isinstance(run_kwargs[k], int) or isinstance(run_kwargs[k], bool)):
            raise ConfigError(k, "must be an integer")
    try:
        run = RunConfig(**run_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(next(iter(sorted(run_kwargs))) if run_kwargs else "<run>", str(exc)) from None

    backend = dict(d.get("backend") or {"kind": "scripted"})
    kind = backend.get("kind", "scripted")
    if kind not in ("scripted", "http"):
        raise ConfigError("backend.kind", f"unsupported backend {kind!r}")
    if kind == "http":
        try:
            HTTPConfig.from_dict({k: v for k, v in backend.items() if k != "kind"})
        except KeyError as exc:
            raise ConfigError(f"backend.{exc.args[0]}", "missing or unknown key") from None
    elif set(backend) - {"kind"}:
        raise ConfigError(f"backend.{sorted(set(backend) - {'kind'})[0]}", "unknown key")

    workers = d.get("parallel_workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("parallel_workers", "must be a positive integer")
    evo = d.get("evolution") or {}
    unknown = set(evo) - set(EvolutionConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"evolution.{sorted(unknown)[0]}", "unknown key")
    return HarnessConfig(run, backend, workers, EvolutionConfig.from_dict(evo), d)


def load_tasks(path: str | Path) -> list[TaskSpec]:
    return [TaskSpec.from_dict(d) for d in read_jsonl(path)]


def load_scenario(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _hash(obj: Any) -> str:
    return hashlib.sha256(dumps_line(obj).encode("utf-8")).hexdigest()


def inputs_hash(scenario: Mapping, tasks: Sequence[TaskSpec], seed: int) -> str:
    """Identity of what an arm was run on: scenario, tasks and seed."""
    return _hash([scenario, [t.to_dict() for t in tasks], seed])


# --- bundled scenarios ------------------------------------------------------


def bundled_root() -> Path:
    return Path(str(resources.files("evoagent") / "scenarios"))


def bundled_scenarios() -> list[str]:
    return sorted(p.name for p in bundled_root().iterdir() if (p / "scenario.json").is_file())


def bundled_paths(name: str) -> tuple[Path, Path, Path]:
    d = bundled_root() / name
    if not (d / "scenario.json").is_file():
        raise ConfigError("scenario", f"no bundled scenario {name!r}")
    return d / "config.json", d / "scenario.json", d / "tasks.jsonl"


# --- wiring -----------------------------------------------------------------


def initial_store(scenario: Mapping) -> CognitionStore:
    """Seed cognition from the tool and peer descriptions a scenario provides."""
    extra = scenario.get("cognition") or {}
    state = seed_state(
        tools=[{"name": t["name"], "description": t["description"], "preconditions": t.get("preconditions", [])}
               for t in scenario.get("tools", [])],
        peers=[{"peer_id": p["peer_id"], "expertise": p.get("expertise") or {}} for p in scenario.get("peers", [])],
        skills=extra.get("skills", []),
        composites=extra.get("composites", []),
        feedback=extra.get("feedback", []),
    )
    return CognitionStore(state)


def task_seed(seed: int, task_id: str) -> int:
    return fnv1a64(f"{seed}:{task_id}")


def make_backend(cfg: HarnessConfig, script: Mapping | None) -> Backend:
    if cfg.backend.get("kind", "scripted") == "http":
        return HTTPBackend(HTTPConfig.from_dict({k: v for k, v in cfg.backend.items() if k != "kind"}))
    return ScriptedBackend(ScriptedScenario.from_dict(script))


def _script_for(scenario: Mapping, task_id: str) -> Mapping | None:
    return (scenario.get("scripts") or {}).get(task_id, scenario.get("script"))


def _peer_agents(scenario: Mapping, cfg: HarnessConfig, seed: int) -> dict[str, Callable]:
    """Peers backed by their own nested agent: own cognition, memory, world and script."""
    agents = {}
    for p in scenario.get("peers", []):
        if "agent" not in p:
            continue
        sub = p["agent"]

        def run_peer(task: TaskSpec, depth: int, sub=sub) -> Trajectory:
            sub_cfg = replace(cfg, run=replace(cfg.run, **(sub.get("run") or {})))
            world = world_from_scenario(sub, task_seed(seed, task.task_id), _peer_agents(sub, sub_cfg, seed),
                                        sub_cfg.run.delegation_cap)
            agent = Agent(initial_store(sub), world, make_backend(sub_cfg, _script_for(sub, task.task_id)),
                          sub_cfg.run, depth=depth)
            return agent.run(task)

        agents[p["peer_id"]] = run_peer
    return agents


def config_snapshot(cfg: HarnessConfig, scenario: Mapping, store: CognitionStore) -> dict:
    return {"run": cfg.run.to_dict(), "backend": cfg.backend.get("kind", "scripted"),
            "scenario": scenario.get("name", ""), "scenario_sha256": _hash(scenario)[:16],
            "cognition_version": store.version}


@dataclass
class TaskResult:
    trajectory: Trajectory
    memory_lines: list[dict]
    memory_stats: dict


def run_task(task: TaskSpec, cfg: HarnessConfig, scenario: Mapping, store: CognitionStore,
             trace: Callable[[str], None] | None = None) -> TaskResult:
    seed = cfg.run.seed
    world = world_from_scenario(scenario, task_seed(seed, task.task_id), _peer_agents(scenario, cfg, seed),
                                cfg.run.delegation_cap)
    agent = Agent(store, world, make_backend(cfg, _script_for(scenario, task.task_id)), cfg.run,
                  config_snapshot=config_snapshot(cfg, scenario, store), trace=trace)
    traj = agent.run(task)
    stats = {"degraded_steps": agent.degraded_steps, "compressor_fallbacks": agent.pool.compressor_fallbacks}
    lines = agent.pool.snapshot_lines(stats)
    return TaskResult(traj, lines, lines[-1]["stats"])


# --- metrics ----------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def path_similarity(executed: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        raise MissingReferencePath("empty reference path")
    return lcs_length(executed, reference) / len(reference)


def _norm(text: str | None) -> str:
    return " ".join((text or "").casefold().split()).strip(" .")


def goal_reached(traj: Trajectory, scenario: Mapping) -> bool | None:
    """Replays successful affordance calls on the scenario map; None without a map."""
    if not scenario.get("env"):
        return None
    handlers = {t["name"]: t.get("handler", t["name"]) for t in scenario.get("tools", [])}
    calls = [(handlers[r.kind.target], r.parameters) for r in traj.records
             if r.kind.variant is ActionVariant.EMIC_TOOL_CALL and handlers.get(r.kind.target) in AFFORDANCES
             and r.outcome.status is OutcomeStatus.SUCCESS]
    return replay_affordances(MiniEnv.from_dict(scenario["env"]), calls).goal_reached


def task_success(traj: Trajectory, scenario: Mapping | None = None) -> bool:
    if traj.final_status is not FinalStatus.SOLVED:
        return False
    if traj.task.gold_answer is not None and _norm(traj.final_answer) != _norm(traj.task.gold_answer):
        return False
    return goal_reached(traj, scenario or {}) is not False


@dataclass(frozen=True)
class Metrics:
    success_rate: float
    avg_steps: float
    prompt_tokens_total: int
    completion_tokens_total: int
    path_similarity: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def task_row(traj: Trajectory, scenario: Mapping | None = None) -> dict:
    ref = traj.task.reference_path
    return {
        "task_id": traj.task.task_id,
        "final_status": traj.final_status.value if traj.final_status else None,
        "final_answer": traj.final_answer,
        "success": task_success(traj, scenario),
        "steps": len(traj),
        "prompt_tokens": int(traj.usage.get("prompt_tokens", 0)),
        "completion_tokens": int(traj.usage.get("completion_tokens", 0)),
        "path_similarity": path_similarity(traj.action_names(), ref) if ref else None,
    }


def aggregate(rows: Sequence[Mapping]) -> Metrics:
    n = len(rows)
    sims = [r["path_similarity"] for r in rows if r["path_similarity"] is not None]
    return Metrics(
        success_rate=sum(bool(r["success"]) for r in rows) / n if n else 0.0,
        avg_steps=sum(r["steps"] for r in rows) / n if n else 0.0,
        prompt_tokens_total=sum(r["prompt_tokens"] for r in rows),
        completion_tokens_total=sum(r["completion_tokens"] for r in rows),
        path_similarity=sum(sims) / len(sims) if sims else None,
    )


def compute_metrics(logs: Sequence[Trajectory], tasks: Sequence[TaskSpec] | None = None,
                    scenario: Mapping | None = None, require_paths: bool = False) -> Metrics:
    """Metrics over finished trajectories; ``tasks`` (if given) supply reference paths."""
    by_id = {t.task_id: t for t in tasks or ()}
    trajs = [replace(tr, task=by_id.get(tr.task.task_id, tr.task)) for tr in logs]
    if require_paths:
        missing = [t.task.task_id for t in trajs if not t.task.reference_path]
        if missing:
            raise MissingReferencePath(f"task {missing[0]!r} has no reference path")
    return aggregate([task_row(t, scenario) for t in sorted(trajs, key=lambda t: t.task.task_id)])


@dataclass
class Report:
    rows: list[dict]
    metrics: Metrics
    config: Mapping[str, Any]
    inputs_hash: str
    store_version_before: int
    store_version_after: int

    def to_dict(self) -> dict:
        return {"rows": self.rows, "metrics": self.metrics.to_dict(), "config": dict(self.config),
                "inputs_hash": self.inputs_hash, "store_version_before": self.store_version_before,
                "store_version_after": self.store_version_after}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Report":
        return cls(list(d["rows"]), Metrics(**d["metrics"]), d["config"], d["inputs_hash"],
                   d["store_version_before"], d["store_version_after"])


# --- run --------------------------------------------------------------------


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: HarnessConfig, scenario: Mapping, tasks: Sequence[TaskSpec], out_dir: str | Path,
        store: CognitionStore | None = None, trace: Callable[[str], None] | None = None) -> Report:
    """Run every task and write the run directory; returns the report."""
    out = Path(out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "memory").mkdir(exist_ok=True)
    store = store or initial_store(scenario)
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError("tasks", "duplicate task_id")

    _write_json(out / "config.json", dict(cfg.raw))
    _write_json(out / "scenario.json", dict(scenario))
    write_jsonl(out / "tasks.jsonl", [t.to_dict() for t in tasks])
    store.save(out / "cognition.jsonl")

    def one(task: TaskSpec) -> TaskResult:
        return run_task(task, cfg, scenario, store, trace)

    if cfg.parallel_workers > 1:
        with ThreadPoolExecutor(cfg.parallel_workers) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]

    rows = []
    for res in sorted(results, key=lambda r: r.trajectory.task.task_id):
        tid = res.trajectory.task.task_id
        (out / "logs" / f"{tid}.jsonl").write_bytes(serialize_trajectory(res.trajectory))
        write_jsonl(out / "memory" / f"{tid}.jsonl", res.memory_lines)
        rows.append(task_row(res.trajectory, scenario))

    report = Report(rows, aggregate(rows), dict(cfg.raw), inputs_hash(scenario, tasks, cfg.run.seed),
                    store.version, store.version)
    _write_json(out / "report.json", report.to_dict())
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _write_json(out / "manifest.json", {"format_version": FORMAT_VERSION, "kind": "run",
                                        "files": {str(p.relative_to(out)): _sha_file(p) for p in files}})
    return report


def run_files(config_path, scenario_path, tasks_path, out_dir, cognition_path=None, trace=None) -> Report:
    store = CognitionStore.load(cognition_path) if cognition_path else None
    return run(load_config(config_path), load_scenario(scenario_path), load_tasks(tasks_path), out_dir, store, trace)


def run_bundled(name: str, out_dir, overrides: Mapping | None = None, store: CognitionStore | None = None) -> Report:
    c, s, t = bundled_paths(name)
    raw = json.loads(c.read_text(encoding="utf-8"))
    raw.update(overrides or {})
    return run(load_config(raw), load_scenario(s), load_tasks(t), out_dir, store)


# --- replay -----------------------------------------------------------------


@dataclass(frozen=True)
class Match:
    ok = True


@dataclass(frozen=True)
class Diverged:
    line: int
    expected: str = ""
    got: str = ""
    ok = False


def compare_logs(original: bytes, regenerated: bytes) -> Match | Diverged:
    a, b = original.split(b"\n"), regenerated.split(b"\n")
    for i in range(max(len(a), len(b))):
        x = a[i] if i < len(a) else b""
        y = b[i] if i < len(b) else b""
        if x != y:
            return Diverged(i + 1, x.decode("utf-8", "replace"), y.decode("utf-8", "replace"))
    return Match()


def replay(log_path: str | Path, run_dir: str | Path | None = None) -> Match | Diverged:
    """Re-execute one task from its run directory and compare log bytes."""
    log_path = Path(log_path)
    data = log_path.read_bytes()
    traj = deserialize_trajectory(data)  # raises MalformedLine on damage
    run_dir = Path(run_dir) if run_dir else log_path.parent.parent
    cfg = load_config(run_dir / "config.json")
    scenario = load_scenario(run_dir / "scenario.json")
    tasks = {t.task_id: t for t in load_tasks(run_dir / "tasks.jsonl")}
    task = tasks.get(traj.task.task_id)
    if task is None:
        return Diverged(1, data.split(b"\n")[0].decode("utf-8", "replace"), "(task not in this run)")
    store = CognitionStore.load(run_dir / "cognition.jsonl")
    regenerated = serialize_trajectory(run_task(task, cfg, scenario, store).trajectory)
    return compare_logs(data, regenerated)


def replay_run(run_dir: str | Path) -> dict[str, Match | Diverged]:
    run_dir = Path(run_dir)
    return {p.stem: replay(p, run_dir) for p in sorted((run_dir / "logs").glob("*.jsonl"))}


# --- evolve -----------------------------------------------------------------


def analyzer_for(cfg: HarnessConfig, scenario: Mapping) -> Backend | None:
    if cfg.backend.get("kind") == "http":
        return make_backend(cfg, None)
    spec = scenario.get("analyzer")
    return ScriptedBackend(ScriptedScenario.from_dict(spec)) if spec else None


def evolve(run_dir: str | Path, out_dir: str | Path | None = None,
           store: CognitionStore | None = None) -> tuple[EvolutionResult, CognitionStore]:
    """One evolution cycle over a run's logs; writes revisions, snapshot and report."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "evolution"
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(run_dir / "config.json")
    scenario = load_scenario(run_dir / "scenario.json")
    store = store or CognitionStore.load(run_dir / "cognition.jsonl")
    before = len(store.revisions)
    corpus = load_corpus(run_dir / "logs")
    stats = [read_jsonl(p)[-1].get("stats", {}) for p in sorted((run_dir / "memory").glob("*.jsonl"))]
    result = evolution_cycle(corpus, store, cfg.evolution, analyzer_for(cfg, scenario), stats, cfg.run.fold_threshold)
    write_jsonl(out / "revisions.jsonl", [r.to_dict() for r in store.revisions[before:]])
    store.save(out / "cognition.jsonl")
    _write_json(out / "report.json", result.to_dict())
    return result, store


# --- ablations --------------------------------------------------------------

ABLATION_MODES = ("emo_on_off", "cognition_evolution")


def first_tool_choice(traj: Trajectory) -> str | None:
    return next((r.kind.target for r in traj.records if r.kind.variant is ActionVariant.EMIC_TOOL_CALL), None)


def tool_estimates(state: CognitionState, tags: Sequence[str]) -> dict[str, float]:
    out = {}
    for name, tool in sorted(state.tools.items()):
        s = sum(tool.reliability.get(t, [0, 0])[0] for t in tags)
        n = sum(tool.reliability.get(t, [0, 0])[1] for t in tags)
        out[name] = round(estimate(s, n), 6)
    return out


def _arm_summary(report: Report) -> dict:
    return {"metrics": report.metrics.to_dict(), "inputs_hash": report.inputs_hash}


def ablate(mode: str, cfg: HarnessConfig, scenario: Mapping, tasks: Sequence[TaskSpec], out_dir: str | Path) -> dict:
    """Comparative report for one of the two ablations."""
    if mode not in ABLATION_MODES:
        raise ConfigError("mode", f"unsupported ablation mode {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if mode == "emo_on_off":
        emo = run(replace(cfg, run=replace(cfg.run, emo=True)), scenario, tasks, out / "emo")
        raw = run(replace(cfg, run=replace(cfg.run, emo=False)), scenario, tasks, out / "raw")
        a, b = emo.metrics.prompt_tokens_total, raw.metrics.prompt_tokens_total
        result = {"mode": mode, "arms": {"emo": _arm_summary(emo), "raw": _arm_summary(raw)},
                  "same_inputs": emo.inputs_hash == raw.inputs_hash,
                  "prompt_token_ratio": a / b if b else None}
    else:
        store = initial_store(scenario)
        before = run(cfg, scenario, tasks, out / "before", store)
        evo, store = evolve(out / "before", out / "evolution", store)
        after = run(cfg, scenario, tasks, out / "after", store)
        stable = {t["name"] for t in scenario.get("tools", []) if float(t.get("failure_probability", 0)) == 0.0}
        tags = sorted({tag for t in tasks for tag in t.domain_tags})

        def choices(run_dir: Path) -> dict:
            trajs = load_corpus(run_dir / "logs")
            picks = [first_tool_choice(t) for t in trajs]
            counts = {name: picks.count(name) for name in sorted({p for p in picks if p})}
            matched = [p for p in picks if p]
            rate = sum(p in stable for p in matched) / len(matched) if matched else 0.0
            return {"first_choice_counts": counts, "stable_choice_rate": rate, "matched_decisions": len(matched)}

        result = {"mode": mode, "evolution": evo.to_dict(),
                  "arms": {"before": {**_arm_summary(before), **choices(out / "before"),
                                      "estimates": tool_estimates(store.replay(0), tags)},
                           "after": {**_arm_summary(after), **choices(out / "after"),
                                     "estimates": tool_estimates(store.state, tags)}},
                  "same_inputs": before.inputs_hash == after.inputs_hash,
                  "stable_tools": sorted(stable)}
    _write_json(out / "ablation.json", result)
    return result
