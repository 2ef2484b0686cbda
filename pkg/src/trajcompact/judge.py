"""Trajectory-grounded judge: prompt construction, verdict parsing, decision."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .compactor import CompactionCandidate
from .context_store import Role, Step
from .errors import PreconditionError, VerdictParseError
from .llm_backend import GenerationRequest, Purpose

JUDGE_PROMPT_ASSET = "judge_prompt_v1.txt"
SUMMARY_SLOT = "{summary_handover}"
ACTIONS_SLOT = "{spec_actions}"
DEFAULT_ACCEPT_THRESHOLD = 7


@lru_cache(maxsize=None)
def load_asset(name: str) -> str:
    return resources.files("trajcompact").joinpath("assets", name).read_text(encoding="utf-8")


def judge_prompt_template() -> str:
    return load_asset(JUDGE_PROMPT_ASSET)


@dataclass(frozen=True)
class SpeculativeWindow:
    """Steps the agent completed on the uncompacted context while compaction ran.

    ``k`` counts agent turns (one reasoning step plus its tool call and
    observation, if any), so for tool-free turns ``k == len(steps)``.
    """

    steps: tuple[Step, ...]
    source_snapshot_id: str

    @property
    def k(self) -> int:
        return sum(1 for s in self.steps if s.role is Role.AGENT_REASONING)


@dataclass(frozen=True)
class JudgeVerdict:
    plan_alignment: int
    information_preservation: int
    score: int
    reasoning: str
    formula_corrected: bool = False

    def to_dict(self) -> dict:
        return {
            "plan_alignment": self.plan_alignment,
            "information_preservation": self.information_preservation,
            "score": self.score,
            "reasoning": self.reasoning,
            "formula_corrected": self.formula_corrected,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeVerdict":
        return cls(
            d["plan_alignment"], d["information_preservation"], d["score"], d["reasoning"], d.get("formula_corrected", False)
        )


@dataclass(frozen=True)
class Decision:
    accepted: bool
    diagnosis: str | None = None

    @property
    def kind(self) -> str:
        return "accept" if self.accepted else "reject"


def round_half_up_mean(plan_alignment: int, information_preservation: int) -> int:
    """``round(0.5 * p + 0.5 * i)`` with ties going up (6.5 -> 7)."""
    return (plan_alignment + information_preservation + 1) // 2


def serialize_window(steps: Sequence[Step], include_observations: bool = False) -> str:
    lines = []
    turn = 0
    for s in steps:
        if s.role is Role.AGENT_REASONING:
            turn += 1
            lines.append(f"[step {turn}] reasoning: {s.content}")
        elif s.role is Role.TOOL_CALL:
            lines.append(f"[step {turn}] tool call: {s.content}")
        elif s.role is Role.TOOL_OBSERVATION and include_observations:
            lines.append(f"[step {turn}] observation: {s.content}")
    return "\n".join(lines)


def build_judge_request(
    candidate: CompactionCandidate,
    window: SpeculativeWindow,
    include_observations: bool = False,
) -> GenerationRequest:
    if window.k < 1:
        raise PreconditionError("the judge needs at least one speculative step")
    if window.source_snapshot_id != candidate.source_snapshot_id:
        raise PreconditionError(
            f"window from {window.source_snapshot_id!r} cannot judge candidate of {candidate.source_snapshot_id!r}"
        )
    prompt = judge_prompt_template()
    actions = serialize_window(window.steps, include_observations)
    # str.replace, not format: the template contains literal JSON braces
    prompt = prompt.replace(SUMMARY_SLOT, candidate.summary).replace(ACTIONS_SLOT, actions)
    return GenerationRequest([{"role": "user", "content": prompt}], Purpose.JUDGE)


def _component(obj: dict, key: str) -> int:
    if key not in obj:
        raise VerdictParseError(f"verdict missing {key!r}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise VerdictParseError(f"{key} must be an integer, got {v!r}")
    if not 0 <= v <= 10:
        raise VerdictParseError(f"{key}={v} outside [0, 10]")
    return v


def parse_verdict(raw: str) -> JudgeVerdict:
    """Strictly parse the judge's JSON reply.

    A score that disagrees with its two components is recomputed and flagged;
    out-of-range or non-integer fields are rejected, never clamped.
    """
    try:
        obj = json.loads(raw.strip())
    except (json.JSONDecodeError, AttributeError) as exc:
        raise VerdictParseError(f"judge output is not JSON: {raw[:120]!r}") from exc
    if not isinstance(obj, dict):
        raise VerdictParseError("judge output must be a JSON object")
    plan = _component(obj, "plan_alignment")
    info = _component(obj, "information_preservation")
    score = _component(obj, "score")
    reasoning = obj.get("reasoning")
    if not isinstance(reasoning, str):
        raise VerdictParseError("verdict reasoning must be a string")
    expected = round_half_up_mean(plan, info)
    if score != expected:
        return JudgeVerdict(plan, info, expected, reasoning, formula_corrected=True)
    return JudgeVerdict(plan, info, score, reasoning)


def decide(verdict: JudgeVerdict, accept_threshold: int = DEFAULT_ACCEPT_THRESHOLD) -> Decision:
    if verdict.score >= accept_threshold:
        return Decision(True)
    diagnosis = verdict.reasoning.strip() or f"judge rejected the candidate with score {verdict.score}"
    return Decision(False, diagnosis)
