"""Script builders shared by the test modules."""

from __future__ import annotations

import json
import random

from trajcompact import MockBackend, Orchestrator, RunConfig, ScriptedBehavior
from trajcompact.llm_backend import ScriptedTools, SimScheduler

TASK = "task"  # one token


def text(tokens: int, tag: str = "") -> str:
    """Exactly ``tokens`` tokens under the 4-chars-per-token heuristic."""
    return (tag + "." * (4 * tokens))[: 4 * tokens]


def turns(n: int, latency: float = 1.0, tokens: int = 100, finish: bool = True, tool_at=()) -> list[dict]:
    out = []
    for i in range(n):
        e = {"content": text(tokens, f"s{i:03d}"), "latency_s": latency}
        if i in tool_at:
            e["tool_call"] = f"search(q={i})"
        if finish and i == n - 1:
            e["tool_call"] = "finish(done)"
        out.append(e)
    return out


def verdict(p: int, i: int, score: int | None = None, reasoning: str = "looks fine") -> str:
    s = (p + i + 1) // 2 if score is None else score
    return json.dumps({"plan_alignment": p, "information_preservation": i, "score": s, "reasoning": reasoning})


ACCEPT = {"entries": [{"content": verdict(9, 9), "latency_s": 0.0}], "cycle": True}
REJECT = {"entries": [{"content": verdict(3, 2, reasoning="lost the pending check"), "latency_s": 0.0}], "cycle": True}


def mock(script: dict) -> tuple[MockBackend, ScriptedTools]:
    behavior = ScriptedBehavior.from_dict(script)
    sched = SimScheduler()
    return MockBackend(behavior, sched), ScriptedTools(behavior.tool, sched)


def run(script: dict, mode: str, threshold: int, *, preamble: str = "", faults=None, query=None, **cfg):
    backend, tools = mock(script)
    orch = Orchestrator(
        backend,
        RunConfig(mode=mode, threshold=threshold, **cfg),
        tools=tools,
        system_preamble=preamble,
        faults=faults,
        query=query,
    )
    return orch.run(TASK), backend


def random_script(rng: random.Random, *, failures: bool = False) -> tuple[dict, int, str]:
    """Randomized scripted run: returns (script, threshold, preamble)."""
    n = rng.randint(6, 30)
    steps, tools = [], []
    for i in range(n):
        e = {"content": text(rng.randint(10, 160), f"s{i:03d}|"), "latency_s": rng.choice([0.5, 1.0, 1.0, 1.5, 2.0])}
        if i < n - 1 and rng.random() < 0.3:
            e["tool_call"] = f"lookup(id={i})"
            tools.append({"content": text(rng.randint(5, 80), f"o{i:03d}|"), "latency_s": rng.choice([0.2, 0.5, 1.0, 3.0])})
        if failures and rng.random() < 0.01:
            e["fail"] = rng.choice(["timeout", "error"])
        steps.append(e)
    steps[-1]["tool_call"] = "finish(ok)"
    compactions = []
    for j in range(6):
        c = {"content": f"summary {j}: " + text(rng.randint(1, 20)), "latency_s": rng.choice([0.0, 0.7, 1.0, 2.5, 3.0, 4.2, 12.0])}
        if failures and rng.random() < 0.2:
            c["fail"] = rng.choice(["timeout", "error"])
        compactions.append(c)
    script = {"agent_step": steps, "compaction": {"entries": compactions, "cycle": True}, "tool": tools}
    if failures:
        judges = []
        for _ in range(5):
            r = rng.random()
            if r < 0.15:
                judges.append({"content": "not json", "fail": "malformed", "latency_s": 0.3})
            elif r < 0.25:
                judges.append({"fail": "error", "latency_s": 0.1})
            else:
                judges.append({"content": verdict(rng.randint(0, 10), rng.randint(0, 10)), "latency_s": rng.choice([0.0, 0.4])})
        updates = []
        for _ in range(4):
            r = rng.random()
            if r < 0.3:
                updates.append({"content": text(5000), "latency_s": 0.5})  # no compression: fails
            elif r < 0.45:
                updates.append({"fail": "timeout", "latency_s": 1.0})
            else:
                updates.append({"content": "repaired " + text(rng.randint(1, 10)), "latency_s": 0.5})
        script["judge"] = {"entries": judges, "cycle": True}
        script["targeted_update"] = {"entries": updates, "cycle": True}
    else:
        script["judge"] = ACCEPT
    preamble = rng.choice(["", "You are an agent.", text(30, "sys ")])
    return script, rng.randint(150, 700), preamble
