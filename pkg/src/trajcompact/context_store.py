"""Trajectory data model, token accounting, snapshots and the compaction trigger."""

from __future__ import annotations

import itertools
import json
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Protocol

from .errors import PreconditionError, SequencingError


class Role(str, Enum):
    AGENT_REASONING = "agent_reasoning"
    TOOL_CALL = "tool_call"
    TOOL_OBSERVATION = "tool_observation"
    USER = "user"
    SUMMARY = "summary"


class Tokenizer(Protocol):
    def count(self, text: str) -> int: ...


class CharHeuristicTokenizer:
    """Roughly four characters per token, rounded up."""

    chars_per_token = 4

    def count(self, text: str) -> int:
        return -(-len(text) // self.chars_per_token)


class CallableTokenizer:
    """Adapter for any ``str -> int`` counter, e.g. a backend tokenizer endpoint."""

    def __init__(self, fn: Callable[[str], int]):
        self._fn = fn

    def count(self, text: str) -> int:
        n = int(self._fn(text))
        if n < 0:
            raise ValueError("tokenizer returned a negative count")
        return n


DEFAULT_TOKENIZER: Tokenizer = CharHeuristicTokenizer()


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return (tokenizer or DEFAULT_TOKENIZER).count(text)


@dataclass(frozen=True)
class Step:
    index: int
    role: Role
    content: str
    token_count: int
    wall_time: float = 0.0

    @classmethod
    def build(
        cls,
        index: int,
        role: Role | str,
        content: str,
        wall_time: float = 0.0,
        tokenizer: Tokenizer | None = None,
    ) -> "Step":
        return cls(index, Role(role), content, count_tokens(content, tokenizer), float(wall_time))

    def with_index(self, index: int) -> "Step":
        return Step(index, self.role, self.content, self.token_count, self.wall_time)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "role": self.role.value,
            "content": self.content,
            "token_count": self.token_count,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Step":
        return cls(int(d["index"]), Role(d["role"]), d["content"], int(d["token_count"]), float(d["wall_time"]))


_WIRE_ROLE = {
    Role.AGENT_REASONING: "assistant",
    Role.TOOL_CALL: "assistant",
    Role.TOOL_OBSERVATION: "user",
    Role.USER: "user",
    # summaries have no chat role of their own; they go back as user turns
    Role.SUMMARY: "user",
}
_WIRE_PREFIX = {
    Role.TOOL_CALL: "[tool_call] ",
    Role.TOOL_OBSERVATION: "[observation] ",
    Role.SUMMARY: "[compacted context]\n",
}


def step_message(step: Step) -> dict:
    return {"role": _WIRE_ROLE[step.role], "content": _WIRE_PREFIX.get(step.role, "") + step.content}


def to_messages(system_preamble: str, steps: Iterable[Step]) -> list[dict]:
    messages = [{"role": "system", "content": system_preamble}] if system_preamble else []
    messages.extend(step_message(s) for s in steps)
    return messages


def _jsonl(header: dict, steps: Iterable[Step]) -> str:
    lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
    lines.extend(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) for s in steps)
    return "\n".join(lines) + "\n"


@dataclass
class TrajectoryContext:
    """The agent's live working state. Single writer: the orchestrator."""

    system_preamble: str = ""
    steps: list[Step] = field(default_factory=list)
    tokenizer: Tokenizer = field(default=DEFAULT_TOKENIZER, repr=False, compare=False)
    active_tokens: int = field(init=False)

    def __post_init__(self) -> None:
        self.active_tokens = self.recount()

    def recount(self) -> int:
        return count_tokens(self.system_preamble, self.tokenizer) + sum(s.token_count for s in self.steps)

    def make_step(self, role: Role | str, content: str, wall_time: float = 0.0) -> Step:
        """Build the next step for this context, tokenized with its adapter."""
        return Step.build(len(self.steps), role, content, wall_time, self.tokenizer)

    def append_step(self, step: Step) -> "TrajectoryContext":
        if step.index != len(self.steps):
            raise SequencingError(f"expected step index {len(self.steps)}, got {step.index}")
        self.steps.append(step)
        self.active_tokens += step.token_count
        return self

    def add(self, role: Role | str, content: str, wall_time: float = 0.0) -> Step:
        step = self.make_step(role, content, wall_time)
        self.append_step(step)
        return step

    def messages(self) -> list[dict]:
        return to_messages(self.system_preamble, self.steps)

    def to_jsonl(self) -> str:
        header = {"snapshot_id": None, "system_preamble": self.system_preamble, "active_tokens": self.active_tokens}
        return _jsonl(header, self.steps)


@dataclass(frozen=True)
class ContextSnapshot:
    snapshot_id: str
    system_preamble: str
    steps: tuple[Step, ...]
    active_tokens: int

    def serialize(self) -> str:
        header = {
            "snapshot_id": self.snapshot_id,
            "system_preamble": self.system_preamble,
            "active_tokens": self.active_tokens,
        }
        return _jsonl(header, self.steps)

    def messages(self) -> list[dict]:
        return to_messages(self.system_preamble, self.steps)


def load_jsonl(text: str) -> ContextSnapshot:
    """Inverse of :meth:`ContextSnapshot.serialize` (also reads live-context dumps)."""
    # split on newlines only: str.splitlines would also break on separators inside JSON strings
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ValueError("empty context trace")
    header = json.loads(lines[0])
    steps = tuple(Step.from_dict(json.loads(ln)) for ln in lines[1:])
    return ContextSnapshot(header.get("snapshot_id") or "", header["system_preamble"], steps, int(header["active_tokens"]))


_RUN_TOKEN = uuid.uuid4().hex[:8]
_snapshot_seq = itertools.count()


def snapshot(ctx: TrajectoryContext, snapshot_id: str | None = None) -> ContextSnapshot:
    if snapshot_id is None:
        snapshot_id = f"snap-{_RUN_TOKEN}-{next(_snapshot_seq)}"
    return ContextSnapshot(snapshot_id, ctx.system_preamble, tuple(ctx.steps), ctx.active_tokens)


def append_step(ctx: TrajectoryContext, step: Step) -> TrajectoryContext:
    return ctx.append_step(step)


def should_compact(ctx: TrajectoryContext, threshold: int) -> bool:
    if threshold <= 0:
        raise PreconditionError("threshold must be positive")
    return ctx.active_tokens >= threshold
