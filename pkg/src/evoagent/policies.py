"""Named deterministic policies for the scripted backend.

A policy reads the request prompt and returns the completion text, or None to
fall through to the scenario's defaults. Each one is a pure function of the
prompt, so a replay makes identical choices.
"""

from __future__ import annotations

import re
from typing import Callable

from .backend import CompletionRequest

Policy = Callable[[CompletionRequest], "str | None"]

_REGISTRY: dict[str, Policy] = {}


def policy(name: str):
    def register(fn: Policy) -> Policy:
        _REGISTRY[name] = fn
        return fn

    return register


def get_policy(name: str) -> Policy:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown policy {name!r}; known: {', '.join(sorted(_REGISTRY))}") from None


def policy_names() -> list[str]:
    return sorted(_REGISTRY)


# --- reading the select prompt ----------------------------------------------


def _section(prompt: str, title: str) -> str:
    m = re.search(rf"^# {re.escape(title)}\n(.*?)(?=^# |\Z)", prompt, re.MULTILINE | re.DOTALL)
    return m.group(1).strip() if m else ""


def _task_text(prompt: str) -> str:
    lines = [ln for ln in _section(prompt, "Task").splitlines() if not ln.startswith("tags: ")]
    return " ".join(lines).strip()


def _actions(prompt: str) -> list[tuple[str, str, str]]:
    """``(name, variant, knowledge block)`` for every offered action, in prompt order."""
    body = _section(prompt, "Actions")
    out = []
    for m in re.finditer(r"^## (\S+) \[(\w+)\]\n(.*?)(?=^## |\Z)", body, re.MULTILINE | re.DOTALL):
        out.append((m.group(1), m.group(2), m.group(3)))
    return out


def _required_params(block: str) -> list[str]:
    m = re.search(r"^parameters: (.*)$", block, re.MULTILINE)
    if not m or m.group(1) == "none":
        return []
    return re.findall(r"(\S+) \(required\)", m.group(1))


def _estimate(block: str) -> float:
    values = [float(v) for v in re.findall(r"\(estimate ([0-9.]+)\)", block)]
    return min(values) if values else 0.5


def _clean(value: str) -> str:
    """Parameter values may not contain the field separator or newlines."""
    return " ".join(value.replace(";", ",").split())


def _line(action: str, params: dict[str, str], intention: str) -> str:
    args = "; ".join(f"{k}={_clean(v)}" for k, v in params.items())
    return f"ACTION: {action}; PARAMS: {args}; INTENTION: {intention}"


_ERROR_WORDS = "ToolError|Timeout|ParseError"


def _failed_actions(memory: str) -> set[str]:
    failed = set(re.findall(rf"^action: \w+ (\S+)\nparams: .*\nstatus: (?:{_ERROR_WORDS})$", memory, re.MULTILINE))
    failed |= set(re.findall(rf"^(\S+) (?:{_ERROR_WORDS})\b", memory, re.MULTILINE))
    return failed


def _latest_success(memory: str) -> tuple[str, str] | None:
    """``(action, payload)`` of the newest raw entry, when it is a successful tool call."""
    blocks = re.findall(r"^\[step \d+ \| raw\]\n(.*?)(?=\n\n\[|\Z)", memory, re.MULTILINE | re.DOTALL)
    if not blocks:
        return None
    last = blocks[-1]
    action = re.search(r"^action: EmicToolCall (\S+)$", last, re.MULTILINE)
    status = re.search(r"^status: (\w+)$", last, re.MULTILINE)
    payload = re.search(r"^payload: (.*)\Z", last, re.MULTILINE | re.DOTALL)
    if action and status and status.group(1) == "Success" and payload:
        return action.group(1), payload.group(1)
    return None


# --- select policies --------------------------------------------------------


@policy("reliability_greedy")
def reliability_greedy(request: CompletionRequest) -> str | None:
    """Call the tool with the best rendered reliability; answer with its first success.

    Tools that already failed in this task are skipped. Ties go to the tool
    listed first, which is the lexicographically smallest name.
    """
    prompt = request.prompt
    memory = _section(prompt, "Working memory")
    done = _latest_success(memory)
    if done is not None:
        return _line("FinalAnswer", {"answer": done[1]}, f"report the result from {done[0]}")
    tools = [(name, block) for name, variant, block in _actions(prompt) if variant == "EmicToolCall"]
    if not tools:
        return None
    failed = _failed_actions(memory)
    pool = [t for t in tools if t[0] not in failed] or tools
    best = max(pool, key=lambda t: _estimate(t[1]))  # max keeps the first of equal scores
    task = _task_text(prompt)
    params = {p: task for p in _required_params(best[1])}
    return _line(best[0], params, f"look up the answer with {best[0]}")


_KEYS = re.compile(r"\bkeys?:\s*([\w\- ]+?)\s*(?:\.|$)", re.MULTILINE)


@policy("sweep")
def sweep(request: CompletionRequest) -> str | None:
    """Read every listed key once, then answer with the sum of the readings.

    Values are recovered from whatever the working memory shows. A key whose
    value is no longer visible gets read again, so memory that loses facts
    costs extra steps.
    """
    prompt = request.prompt
    m = _KEYS.search(_task_text(prompt))
    if not m:
        return None
    keys = m.group(1).split()
    memory = _section(prompt, "Working memory")
    values = {}
    for key in keys:
        hit = re.search(rf"\b{re.escape(key)}\s*[:=]\s*(\d+)", memory)
        if hit:
            values[key] = int(hit.group(1))
    missing = [k for k in keys if k not in values]
    if missing:
        return _line("reading", {"key": missing[0]}, f"read sensor {missing[0]}")
    return _line("FinalAnswer", {"answer": str(sum(values.values()))}, "report the total of all readings")


@policy("think_forever")
def think_forever(request: CompletionRequest) -> str:
    """Never finishes: the step cap is the only way out."""
    return _line("Generate", {"prompt": "consider the task further"}, "keep thinking")


# --- memory policies --------------------------------------------------------


def _raw_fields(raw: str) -> dict[str, str]:
    fields = {}
    for key in ("action", "status", "error", "payload"):
        m = re.search(rf"^{key}: (.*)$", raw, re.MULTILINE)
        if m:
            fields[key] = m.group(1)
    return fields


@policy("extractive")
def extractive(request: CompletionRequest) -> str | None:
    """One-line summary: action name, status and the first words of the payload."""
    f = _raw_fields(request.prompt)
    if "action" not in f or "status" not in f:
        return None
    name = f["action"].split()[-1]
    words = f.get("payload", "").split()[:12]
    return f"{name} {f['status']}: {' '.join(words)}".strip()


@policy("recent_raw")
def recent_raw(request: CompletionRequest) -> str | None:
    """Last two steps Raw, every other listed step Summary."""
    idx = [int(i) for i in re.findall(r"^\[(\d+)\] ", request.prompt, re.MULTILINE)]
    if not idx:
        return None
    recent = set(idx[-2:])
    return ", ".join(f"{i}:{'Raw' if i in recent else 'Summary'}" for i in idx)


@policy("recency")
def recency(request: CompletionRequest) -> str | None:
    """Last two steps Raw, the six before them Summary, older ones Omit."""
    idx = [int(i) for i in re.findall(r"^\[(\d+)\] ", request.prompt, re.MULTILINE)]
    if not idx:
        return None
    reps = {}
    for rank, i in enumerate(reversed(idx)):
        reps[i] = "Raw" if rank < 2 else "Summary" if rank < 8 else "Omit"
    return ", ".join(f"{i}:{reps[i]}" for i in idx)


_FACT = re.compile(r"([A-Za-z][\w\-]*)\s*:\s*(\d[\d.]*)")


@policy("digest")
def digest(request: CompletionRequest) -> str | None:
    """Episode that keeps the ``name: number`` facts of the condensed steps."""
    lines = re.findall(r"^\[(\d+)\] (.*)$", request.prompt, re.MULTILINE)
    if not lines:
        return None
    facts = []
    for _, text in lines:
        found = [f"{k}: {v}" for k, v in _FACT.findall(text) if k.lower() not in ("reading", "step")]
        facts.extend(found or [" ".join(text.split()[:2])])
    first, last = lines[0][0], lines[-1][0]
    return f"GOAL: steps {first}-{last}\nKEY_ACTIONS: {'; '.join(facts)}\nRESOLUTION: done"


# --- evolution policies -----------------------------------------------------


@policy("status_judge")
def status_judge(request: CompletionRequest) -> str | None:
    """Judges a step by its status and whether the payload says anything."""
    f = _raw_fields(request.prompt)
    status = f.get("status")
    if status is None:
        return None
    payload = f.get("payload", "").strip().lower()
    if status in ("Success", "PeerResponse") and payload and not payload.startswith("i don't know"):
        return "Fulfilled: the outcome delivers what the intention asked for"
    return "Violated: the outcome does not deliver what the intention asked for"


@policy("echo")
def echo(request: CompletionRequest) -> str:
    """Returns the first line of the prompt; a stand-in for free generation."""
    first = request.prompt.strip().splitlines()
    return first[0] if first else "(nothing)"
