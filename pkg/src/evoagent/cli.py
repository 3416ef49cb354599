"""Command-line entry point: ``evoagent <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cognition import CognitionStore
from .core import MalformedLine, read_jsonl
from .harness import (
    ABLATION_MODES,
    ConfigError,
    Report,
    ablate,
    bundled_paths,
    bundled_scenarios,
    evolve,
    load_config,
    load_scenario,
    load_tasks,
    replay,
    replay_run,
    run_files,
)


def _inputs(args) -> tuple[Path, Path, Path]:
    if args.bundled:
        c, s, t = bundled_paths(args.bundled)
        return Path(args.config or c), Path(args.scenario or s), Path(args.tasks or t)
    if not (args.config and args.scenario and args.tasks):
        raise ConfigError("<args>", "give --bundled NAME or all of --config, --scenario and --tasks")
    return Path(args.config), Path(args.scenario), Path(args.tasks)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    c, s, t = _inputs(args)
    trace = (lambda line: print(line, file=sys.stderr)) if args.trace else None
    report = run_files(c, s, t, args.out, args.cognition, trace)
    _print({"out": str(args.out), "metrics": report.metrics.to_dict()})
    return 0


def cmd_replay(args) -> int:
    target = Path(args.path)
    verdicts = replay_run(target) if target.is_dir() else {target.stem: replay(target)}
    bad = 0
    for task_id, v in verdicts.items():
        if v.ok:
            print(f"{task_id}: Match")
        else:
            bad += 1
            print(f"{task_id}: Diverged at line {v.line}")
    return 1 if bad else 0


def cmd_ablate(args) -> int:
    c, s, t = _inputs(args)
    _print(ablate(args.mode, load_config(c), load_scenario(s), load_tasks(t), args.out))
    return 0


def cmd_evolve(args) -> int:
    result, store = evolve(args.run_dir, args.out)
    _print(result.to_dict())
    return 0


def cmd_report(args) -> int:
    report = Report.from_dict(json.loads((Path(args.run_dir) / "report.json").read_text(encoding="utf-8")))
    if args.json:
        _print(report.to_dict())
        return 0
    print(f"{'task':24} {'status':8} {'ok':3} {'steps':>5} {'prompt':>8} {'path':>6}")
    for r in report.rows:
        sim = "-" if r["path_similarity"] is None else f"{r['path_similarity']:.3f}"
        print(f"{r['task_id']:24} {r['final_status']:8} {'yes' if r['success'] else 'no':3} "
              f"{r['steps']:>5} {r['prompt_tokens']:>8} {sim:>6}")
    _print(report.metrics.to_dict())
    return 0


def cmd_memory(args) -> int:
    lines = read_jsonl(args.file)
    if args.action == "stats":
        _print(lines[-1].get("stats", {}))
        return 0
    for line in lines:
        if "step" in line:
            s = line["summary"]
            print(f"[{s['step_index']}] {s['summary_text']}")
        elif "episode" in line:
            e = line["episode"]
            print(f"[episode {e['episode_id']} steps {e['covered_range'][0]}-{e['covered_range'][1]}] {e['text']}")
    return 0


def cmd_cognition(args) -> int:
    if args.action == "export":
        store = CognitionStore.load(args.snapshot)
        text = store.state.dumps() + "\n"
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return 0
    store = CognitionStore.load(args.snapshot)
    store.save(args.out)
    print(f"imported {len(store.revisions)} revisions, version {store.version}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evoagent", description="Self-evolving agent runtime and experiment harness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def inputs(sp):
        sp.add_argument("--bundled", choices=bundled_scenarios(), help="use a bundled scenario")
        sp.add_argument("--config")
        sp.add_argument("--scenario")
        sp.add_argument("--tasks")
        sp.add_argument("--out", required=True, help="run directory to create")

    sp = sub.add_parser("run", help="run every task and write a run directory")
    inputs(sp)
    sp.add_argument("--cognition", help="cognition snapshot to start from")
    sp.add_argument("--trace", action="store_true", help="stream SELECT/EXECUTE/UPDATE lines to stderr")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("replay", help="re-execute a log (or a whole run directory) and compare bytes")
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_replay)

    sp = sub.add_parser("ablate", help="run one of the comparative experiments")
    sp.add_argument("mode", help=" | ".join(ABLATION_MODES))
    inputs(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("evolve", help="one evolution cycle over a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_evolve)

    sp = sub.add_parser("report", help="print a run's report")
    sp.add_argument("run_dir")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("memory", help="inspect a per-task memory snapshot")
    sp.add_argument("action", choices=("dump", "stats"))
    sp.add_argument("file")
    sp.set_defaults(fn=cmd_memory)

    sp = sub.add_parser("cognition", help="export the materialized store or import a snapshot")
    sp.add_argument("action", choices=("export", "import"))
    sp.add_argument("snapshot")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_cognition)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "cognition" and args.action == "import" and not args.out:
        print("cognition import needs --out", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MalformedLine, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
