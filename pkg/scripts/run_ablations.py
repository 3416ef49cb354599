"""Run both comparative experiments on the bundled scenarios and print a summary.

    python scripts/run_ablations.py --out runs/ablations
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from evoagent.harness import ablate, bundled_paths, load_config, load_scenario, load_tasks

EXPERIMENTS = (("emo_on_off", "emo_suite"), ("cognition_evolution", "tool_instability"))


def summarize(mode: str, result: dict) -> dict:
    arms = result["arms"]
    if mode == "emo_on_off":
        return {
            "success_emo": arms["emo"]["metrics"]["success_rate"],
            "success_raw": arms["raw"]["metrics"]["success_rate"],
            "prompt_tokens_emo": arms["emo"]["metrics"]["prompt_tokens_total"],
            "prompt_tokens_raw": arms["raw"]["metrics"]["prompt_tokens_total"],
            "prompt_token_ratio": round(result["prompt_token_ratio"], 4),
            "same_inputs": result["same_inputs"],
        }
    return {
        "committed": result["evolution"]["committed"],
        "by_kind": result["evolution"]["by_kind"],
        "estimates_before": arms["before"]["estimates"],
        "estimates_after": arms["after"]["estimates"],
        "first_choice_before": arms["before"]["first_choice_counts"],
        "first_choice_after": arms["after"]["first_choice_counts"],
        "stable_choice_rate_after": arms["after"]["stable_choice_rate"],
        "success_before": arms["before"]["metrics"]["success_rate"],
        "success_after": arms["after"]["metrics"]["success_rate"],
        "same_inputs": result["same_inputs"],
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/ablations", help="directory for run outputs")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    args = parser.parse_args()

    summary = {}
    for mode, scenario_name in EXPERIMENTS:
        c, s, t = bundled_paths(scenario_name)
        raw = json.loads(c.read_text(encoding="utf-8"))
        if args.seed is not None:
            raw["seed"] = args.seed
        start = time.perf_counter()
        result = ablate(mode, load_config(raw), load_scenario(s), load_tasks(t), Path(args.out) / mode)
        summary[mode] = {"scenario": scenario_name, "seconds": round(time.perf_counter() - start, 3),
                         **summarize(mode, result)}
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
