"""Scripted workloads: desk-scale stand-ins for real agent benchmarks.

A workload file is JSON::

    {"name": ..., "system_preamble": ...,
     "queries": [{"name": ..., "task": ...,
                  "script": {<purpose>: [entries], "tool": [entries]},
                  "oracle": {"required_spans": [...], "repair": true},
                  "expected": {...}}],
     "faults": [{"mode", "target", "replacement", "query"?, "compaction"?}]}

A bare per-purpose script (the mock backend's own format) is accepted as a
one-query workload.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field
from typing import Any

from .compactor import FaultSchedule
from .context_store import Tokenizer
from .llm_backend import MockBackend, Purpose, ScriptedBehavior, ScriptedTools, ScriptQueue, SimScheduler
from .oracles import OracleJudge, OracleRepairer

_PURPOSE_KEYS = {p.value for p in Purpose} | {"tool"}


@dataclass
class QueryScript:
    name: str
    task: str
    script: dict
    oracle: dict | None = None
    expected: dict = field(default_factory=dict)

    def problems(self) -> list[str]:
        out = []
        unknown = set(self.script) - _PURPOSE_KEYS
        if unknown:
            out.append(f"query {self.name}: unknown script purposes {sorted(unknown)}")
        if not self.script.get("agent_step"):
            out.append(f"query {self.name}: script has no agent_step entries")
        if not self.script.get("judge") and not self.oracle:
            out.append(f"query {self.name}: no scripted judge verdicts and no oracle judge")
        if self.oracle is not None and not self.oracle.get("required_spans"):
            out.append(f"query {self.name}: oracle needs required_spans")
        return out

    def behavior(self) -> ScriptedBehavior:
        behavior = ScriptedBehavior.from_dict(self.script)
        if self.oracle:
            spans = self.oracle["required_spans"]
            if not self.script.get("judge"):
                behavior.queues[Purpose.JUDGE] = ScriptQueue(
                    responder=OracleJudge(spans), responder_latency=float(self.oracle.get("judge_latency_s", 0.0))
                )
            if self.oracle.get("repair", True) and not self.script.get("targeted_update"):
                behavior.queues[Purpose.TARGETED_UPDATE] = ScriptQueue(
                    responder=OracleRepairer(spans), responder_latency=float(self.oracle.get("update_latency_s", 0.0))
                )
        return behavior

    def mock(self, tokenizer: Tokenizer | None = None) -> tuple[MockBackend, ScriptedTools]:
        behavior = self.behavior()
        scheduler = SimScheduler()
        return MockBackend(behavior, scheduler, tokenizer), ScriptedTools(behavior.tool, scheduler)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "task": self.task, "script": self.script}
        if self.oracle is not None:
            d["oracle"] = self.oracle
        if self.expected:
            d["expected"] = self.expected
        return d


@dataclass
class WorkloadScript:
    name: str
    system_preamble: str
    queries: list[QueryScript]
    faults: list[dict] = field(default_factory=list)

    def problems(self) -> list[str]:
        out = []
        if not self.queries:
            out.append("workload has no queries")
        names = [q.name for q in self.queries]
        if len(set(names)) != len(names):
            out.append("query names must be unique")
        for q in self.queries:
            out.extend(q.problems())
        try:
            FaultSchedule.from_list(self.faults)
        except Exception as exc:
            out.append(f"faults: {exc}")
        return out

    def fault_schedule(self) -> FaultSchedule | None:
        return FaultSchedule.from_list(self.faults) if self.faults else None

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadScript":
        if "queries" not in d and set(d) <= _PURPOSE_KEYS:
            return cls("script", "", [QueryScript("q0", "Complete the scripted task.", dict(d))])
        queries = [
            QueryScript(q["name"], q.get("task", ""), q.get("script", {}), q.get("oracle"), q.get("expected", {}))
            for q in d["queries"]
        ]
        return cls(d.get("name", "workload"), d.get("system_preamble", ""), queries, list(d.get("faults", [])))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "WorkloadScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "system_preamble": self.system_preamble,
            "queries": [q.to_dict() for q in self.queries],
            "faults": self.faults,
        }

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# generator

_WORDS = (
    "parser config cache module index handler query buffer result schema token vector "
    "record driver thread socket stream kernel router bucket layer filter signal"
).split()


def _text(rng: random.Random, tokens: int, prefix: str = "") -> str:
    """Text of exactly ``tokens`` tokens under the 4-chars-per-token heuristic."""
    target = 4 * tokens
    out = prefix
    while len(out) < target:
        out += (" " if out else "") + rng.choice(_WORDS)
    return out[:target]


@dataclass
class WorkloadParams:
    queries: int = 10
    turns: int = 24
    step_latency_s: float = 1.0
    tool_every: int = 0  # every n-th turn issues a tool call; 0 disables tools
    tool_share: float = 0.4  # fraction of a tool turn's time spent executing the tool
    tokens_per_turn: int = 250
    compaction_latency_s: float = 3.0
    summary_tokens: int = 120
    judge_latency_s: float = 0.0
    update_latency_s: float = 0.0
    corruption_rate: float = 0.0
    corruption_modes: tuple[str, ...] = ("omission", "commission", "entity_replacement")
    preamble_tokens: int = 40

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadParams":
        d = dict(d)
        if "corruption_modes" in d:
            d["corruption_modes"] = tuple(d["corruption_modes"])
        return cls(**d)


def _key_fact(q: int, rng: random.Random) -> tuple[str, str, str]:
    entity = f"Entity{q}-{rng.randrange(10_000):04d}"
    return entity, f"[VERIFIED] key fact: {entity} is the confirmed answer", f"Decoy{q}-{rng.randrange(10_000):04d}"


def generate_workload(params: WorkloadParams, seed: int = 0, name: str = "generated") -> WorkloadScript:
    """Build a deterministic scripted workload from ``params`` and ``seed``.

    Every query carries one key fact the continuation depends on; the oracle
    judge requires it in any adopted summary. ``corruption_rate`` selects
    exactly ``round(rate * queries)`` queries whose first compaction is
    corrupted, cycling through ``corruption_modes``.
    """
    rng = random.Random(seed)
    p = params
    queries = []
    faults = []
    n_corrupt = round(p.corruption_rate * p.queries)
    corrupted = sorted(rng.sample(range(p.queries), n_corrupt)) if n_corrupt else []
    for q in range(p.queries):
        qname = f"q{q:03d}"
        entity, fact, decoy = _key_fact(q, rng)
        steps, tools = [], []
        for t in range(p.turns):
            tool_turn = p.tool_every and (t + 1) % p.tool_every == 0 and t < p.turns - 1
            last = t == p.turns - 1
            reason_latency = p.step_latency_s * (1 - p.tool_share) if tool_turn else p.step_latency_s
            lead = f"turn {t}: continue with {entity}. " if t % 3 == 0 else f"turn {t}: "
            entry: dict[str, Any] = {
                "content": _text(rng, p.tokens_per_turn if not tool_turn else p.tokens_per_turn // 2, lead),
                "latency_s": round(reason_latency, 6),
            }
            if tool_turn:
                entry["tool_call"] = f"search(query='{rng.choice(_WORDS)} {t}')"
                tools.append(
                    {
                        "content": _text(rng, p.tokens_per_turn - p.tokens_per_turn // 2 - 8, "result: "),
                        "latency_s": round(p.step_latency_s * p.tool_share, 6),
                    }
                )
            if last:
                entry["tool_call"] = f"finish(answer='{entity}')"
            steps.append(entry)
        summary = "\n".join(
            [
                f"Task goal: answer query {qname}.",
                fact,
                f"[PENDING] cross-check {entity} against a second source",
                _text(rng, max(p.summary_tokens - 30, 1), "Progress: "),
            ]
        )
        script = {
            "agent_step": steps,
            "compaction": {"entries": [{"content": summary, "latency_s": p.compaction_latency_s}], "cycle": True},
        }
        if tools:
            script["tool"] = tools
        queries.append(
            QueryScript(
                qname,
                f"Find the confirmed answer for {qname}.",
                script,
                {
                    "required_spans": [fact],
                    "judge_latency_s": p.judge_latency_s,
                    "update_latency_s": p.update_latency_s,
                },
                {"corrupted": q in corrupted},
            )
        )
        if q in corrupted:
            mode = p.corruption_modes[corrupted.index(q) % len(p.corruption_modes)]
            if mode == "omission":
                faults.append({"mode": mode, "target": fact + "\n", "query": qname, "compaction": 0})
            elif mode == "commission":
                faults.append(
                    {
                        "mode": mode,
                        "target": fact,
                        "replacement": "[VERIFIED] key fact: every candidate is confirmed; stop checking",
                        "query": qname,
                        "compaction": 0,
                    }
                )
            else:
                faults.append(
                    {"mode": mode, "target": entity, "replacement": decoy, "query": qname, "compaction": 0}
                )
    preamble = _text(rng, p.preamble_tokens, "You are a careful research agent. ")
    return WorkloadScript(name, preamble, queries, faults)
