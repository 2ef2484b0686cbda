"""Compaction requests, candidates, and fault injection on candidates."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

from .context_store import ContextSnapshot, Tokenizer, count_tokens
from .errors import BackendError, CompactionFailed, InjectionError, PreconditionError
from .llm_backend import GenerationRequest, GenerationResponse, Purpose

logger = logging.getLogger(__name__)

COMPACTION_INSTRUCTION = """\
Compact the conversation above into a handover summary that the agent will resume from \
in place of the full history. The system instructions are kept separately; do not repeat them.

Preserve, concisely and concretely:
- the task goal and every constraint stated by the user;
- verified facts, intermediate results and tool observations the work depends on \
(names, paths, values, test outcomes);
- the current plan and the next intended action;
- every open or pending item. Mark each one on its own line with [PENDING] or [OPEN] \
so it can be checked later; mark confirmed items [VERIFIED].

Do not invent information that is not in the conversation. Output only the summary."""


@dataclass(frozen=True)
class CompactionCandidate:
    summary: str
    source_snapshot_id: str
    produced_at: float
    compaction_latency: float
    source_tokens: int
    corruptions: tuple[str, ...] = ()


def build_compaction_request(snap: ContextSnapshot) -> GenerationRequest:
    if not snap.steps:
        raise PreconditionError("cannot compact a snapshot with no steps")
    messages = snap.messages() + [{"role": "user", "content": COMPACTION_INSTRUCTION}]
    return GenerationRequest(messages, Purpose.COMPACTION)


def check_compression(summary: str, source_tokens: int, tokenizer: Tokenizer | None = None) -> None:
    n = count_tokens(summary, tokenizer)
    if n >= source_tokens:
        raise CompactionFailed(f"summary has {n} tokens, source has {source_tokens}: no compression")


def candidate_from_response(
    response: GenerationResponse,
    snap: ContextSnapshot,
    produced_at: float,
    tokenizer: Tokenizer | None = None,
) -> CompactionCandidate:
    summary = response.content.strip()
    if not summary:
        raise CompactionFailed("compactor returned an empty summary")
    check_compression(summary, snap.active_tokens, tokenizer)
    return CompactionCandidate(summary, snap.snapshot_id, produced_at, response.latency, snap.active_tokens)


def compact(snap: ContextSnapshot, backend, tokenizer: Tokenizer | None = None) -> CompactionCandidate:
    """Blocking compaction of ``snap``. Raises :class:`CompactionFailed`."""
    req = build_compaction_request(snap)
    try:
        response = backend.generate(req)
    except BackendError as exc:
        raise CompactionFailed(f"compactor backend failed: {exc}") from exc
    return candidate_from_response(response, snap, backend.now(), tokenizer)


# ---------------------------------------------------------------------------
# fault injection (test facility; only active when a fault schedule is given)


class CorruptionMode(str, Enum):
    OMISSION = "omission"
    COMMISSION = "commission"
    ENTITY_REPLACEMENT = "entity_replacement"


@dataclass(frozen=True)
class CorruptionSpec:
    """One injected compaction error.

    ``omission`` deletes the first occurrence of ``target``; ``commission``
    rewrites the first occurrence into ``replacement`` (a mutated instruction);
    ``entity_replacement`` swaps every occurrence of the entity ``target``.
    """

    mode: CorruptionMode
    target: str
    replacement: str | None = None
    query: str | None = None
    compaction: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", CorruptionMode(self.mode))
        if not self.target:
            raise InjectionError("corruption target must be nonempty")
        if self.mode is not CorruptionMode.OMISSION and not self.replacement:
            raise InjectionError(f"{self.mode.value} requires a nonempty replacement")

    def applies_to(self, query: str | None, compaction_index: int) -> bool:
        if self.query is not None and self.query != query:
            return False
        return self.compaction is None or self.compaction == compaction_index

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(d["mode"], d["target"], d.get("replacement"), d.get("query"), d.get("compaction"))


def corrupt_text(summary: str, spec: CorruptionSpec) -> str:
    if spec.target not in summary:
        raise InjectionError(f"target {spec.target!r} not found in summary")
    if spec.mode is CorruptionMode.OMISSION:
        return summary.replace(spec.target, "", 1)
    if spec.mode is CorruptionMode.COMMISSION:
        return summary.replace(spec.target, spec.replacement, 1)
    return summary.replace(spec.target, spec.replacement)


def corrupt(candidate: CompactionCandidate, spec: CorruptionSpec) -> CompactionCandidate:
    return replace(
        candidate,
        summary=corrupt_text(candidate.summary, spec),
        corruptions=candidate.corruptions + (spec.mode.value,),
    )


@dataclass
class FaultSchedule:
    specs: list[CorruptionSpec] = field(default_factory=list)

    def for_lifecycle(self, query: str | None, compaction_index: int) -> list[CorruptionSpec]:
        return [s for s in self.specs if s.applies_to(query, compaction_index)]

    def apply(self, candidate: CompactionCandidate, query: str | None, compaction_index: int) -> CompactionCandidate:
        """Apply every matching spec; specs whose target is absent are skipped with a warning."""
        for spec in self.for_lifecycle(query, compaction_index):
            if spec.target not in candidate.summary:
                logger.warning("fault %s: target %r not in summary of %s", spec.mode.value, spec.target, candidate.source_snapshot_id)
                continue
            candidate = corrupt(candidate, spec)
        return candidate

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "FaultSchedule":
        return cls([CorruptionSpec.from_dict(d) for d in items])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FaultSchedule":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise InjectionError("fault file must hold a JSON list of {mode, target, replacement}")
        return cls.from_list(data)

    def to_list(self) -> list[dict]:
        out = []
        for s in self.specs:
            d = {"mode": s.mode.value, "target": s.target, "replacement": s.replacement}
            if s.query is not None:
                d["query"] = s.query
            if s.compaction is not None:
                d["compaction"] = s.compaction
            out.append(d)
        return out


def classify(spec: CorruptionSpec) -> CorruptionMode:
    return spec.mode

