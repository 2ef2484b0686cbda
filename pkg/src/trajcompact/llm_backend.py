"""Text generation backends and the clocks they run on.

Two schedulers share one small interface (``now``, ``wait_first``, ``cancel``):

* :class:`SimScheduler` is a discrete-event clock. Submitted work registers a
  completion event; waiting jumps the clock to the earliest pending event, so
  concurrent work advances time by the max of its latencies, never the sum.
* :class:`ThreadScheduler` runs real calls on a thread pool against wall time.

The orchestrator only ever submits work and waits for the first completion,
so it runs unchanged on either.
"""

from __future__ import annotations

import concurrent.futures as cf
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .context_store import Tokenizer, count_tokens
from .errors import (
    BackendError,
    BackendTimeout,
    PreconditionError,
    ScriptExhausted,
    TransportError,
    UpstreamRejected,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "TRAJCOMPACT_API_KEY"


class Purpose(str, Enum):
    AGENT_STEP = "agent_step"
    COMPACTION = "compaction"
    JUDGE = "judge"
    TARGETED_UPDATE = "targeted_update"


DEFAULT_MAX_TOKENS = {
    Purpose.AGENT_STEP: 2048,
    Purpose.COMPACTION: 4096,
    Purpose.JUDGE: 512,
    Purpose.TARGETED_UPDATE: 4096,
}

# Lower runs first when two events land on the same simulated instant: a step
# finishing exactly when the compactor returns still counts toward the window.
_PRIORITY = {Purpose.AGENT_STEP: 0, Purpose.COMPACTION: 1, Purpose.JUDGE: 1, Purpose.TARGETED_UPDATE: 1}
TOOL_PRIORITY = 0


@dataclass
class GenerationRequest:
    messages: list[dict]
    purpose: Purpose
    max_output_tokens: int | None = None
    sampling: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.purpose = Purpose(self.purpose)
        if not self.messages:
            raise PreconditionError("a generation request needs at least one message")
        if self.max_output_tokens is None:
            self.max_output_tokens = DEFAULT_MAX_TOKENS[self.purpose]
        if self.max_output_tokens <= 0:
            raise PreconditionError("max_output_tokens must be positive")

    def text(self) -> str:
        return "\n".join(m["content"] for m in self.messages)


@dataclass
class GenerationResponse:
    content: str
    output_tokens: int
    latency: float
    tool_call: str | None = None


@dataclass
class ToolResult:
    observation: str
    latency: float


# ---------------------------------------------------------------------------
# schedulers


class Job:
    """Handle for one unit of in-flight work."""

    def __init__(self, tag: Any, started_at: float):
        self.tag = tag
        self.started_at = started_at
        self.finished_at: float | None = None
        self.cancelled = False
        self._value: Any = None
        self._error: BaseException | None = None

    @property
    def done(self) -> bool:
        return self.finished_at is not None

    def result(self) -> Any:
        if not self.done:
            raise RuntimeError("job has not completed")
        if self._error is not None:
            raise self._error
        return self._value


class _SimJob(Job):
    def __init__(self, tag, started_at, due_us, priority, seq, value, error, on_cancel):
        super().__init__(tag, started_at)
        self.due_us = due_us
        self.order = (due_us, priority, seq)
        self._value = value
        self._error = error
        self.on_cancel = on_cancel


_US = 1_000_000


def _to_us(seconds: float) -> int:
    if seconds < 0:
        raise ValueError("latency must be non-negative")
    return round(seconds * _US)


class SimScheduler:
    """Deterministic discrete-event clock with integer-microsecond resolution."""

    def __init__(self) -> None:
        self._now_us = 0
        self._seq = itertools.count()

    def now(self) -> float:
        return self._now_us / _US

    def submit(
        self,
        latency: float,
        value: Any = None,
        *,
        error: BaseException | None = None,
        priority: int = 0,
        tag: Any = None,
        on_cancel: Callable[[], None] | None = None,
    ) -> Job:
        due = self._now_us + _to_us(latency)
        return _SimJob(tag, self.now(), due, priority, next(self._seq), value, error, on_cancel)

    def wait_first(self, jobs: Iterable[Job]) -> Job:
        live = [j for j in jobs if not j.cancelled]
        if not live:
            raise RuntimeError("wait_first called with no live jobs")
        first = min(live, key=lambda j: (0, j.order) if j.done else (1, j.order))
        if not first.done:
            self._now_us = max(self._now_us, first.due_us)
            first.finished_at = first.due_us / _US
        return first

    def wait(self, job: Job) -> Any:
        self.wait_first([job])
        return job.result()

    def cancel(self, job: Job) -> None:
        if job.done or job.cancelled:
            return
        job.cancelled = True
        if job.on_cancel is not None:
            job.on_cancel()


class _ThreadJob(Job):
    def __init__(self, tag, started_at, future):
        super().__init__(tag, started_at)
        self.future = future


class ThreadScheduler:
    """Wall-clock scheduler backed by a thread pool."""

    def __init__(self, max_workers: int = 4) -> None:
        self._t0 = time.monotonic()
        self._pool = cf.ThreadPoolExecutor(max_workers=max_workers)

    def now(self) -> float:
        return time.monotonic() - self._t0

    def submit_call(self, fn: Callable[[], Any], tag: Any = None) -> Job:
        return _ThreadJob(tag, self.now(), self._pool.submit(fn))

    def wait_first(self, jobs: Iterable[Job]) -> Job:
        live = [j for j in jobs if not j.cancelled]
        for j in live:
            if j.done:
                return j
        by_future = {j.future: j for j in live}
        finished, _ = cf.wait(list(by_future), return_when=cf.FIRST_COMPLETED)
        # stable choice when several finish together
        job = next(j for j in live if j.future in finished)
        job.finished_at = self.now()
        try:
            job._value = job.future.result()
        except BaseException as exc:  # delivered to the caller via result()
            job._error = exc
        return job

    def wait(self, job: Job) -> Any:
        self.wait_first([job])
        return job.result()

    def cancel(self, job: Job) -> None:
        # a request already on the wire cannot be recalled; its result is dropped
        job.cancelled = True
        job.future.cancel()

    def shutdown(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)


# ---------------------------------------------------------------------------
# scripted mock


Responder = Callable[[GenerationRequest], str]


class ScriptQueue:
    """FIFO of scripted entries for one purpose, optionally cycling.

    Alternatively a ``responder`` computes the content from the request, which
    is how deterministic oracle judges plug in.
    """

    def __init__(
        self,
        entries: Sequence[Mapping] = (),
        *,
        cycle: bool = False,
        responder: Responder | None = None,
        responder_latency: float = 0.0,
    ):
        self.entries = [dict(e) for e in entries]
        self.cycle = cycle
        self.responder = responder
        self.responder_latency = responder_latency
        self._pos = 0

    def pop(self, req: GenerationRequest) -> dict:
        if self.responder is not None:
            return {"content": self.responder(req), "latency_s": self.responder_latency}
        if not self.entries or (not self.cycle and self._pos >= len(self.entries)):
            raise ScriptExhausted(f"script for {req.purpose.value!r} exhausted after {self._pos} entries")
        entry = self.entries[self._pos % len(self.entries)]
        self._pos += 1
        return entry

    def unpop(self) -> None:
        if self.responder is None:
            self._pos -= 1

    @property
    def consumed(self) -> int:
        return self._pos


class ScriptedBehavior:
    """Per-purpose scripted queues, loadable from the JSON script format.

    Script JSON: ``{"agent_step": [{"content", "latency_s", "fail"?, "tool_call"?}, ...],
    "compaction": [...], "judge": [...], "targeted_update": [...], "tool": [...]}``.
    A purpose may instead map to ``{"entries": [...], "cycle": true}``.
    """

    def __init__(self, queues: Mapping[Purpose | str, ScriptQueue] | None = None, tool: ScriptQueue | None = None):
        self.queues = {Purpose(p): q for p, q in (queues or {}).items()}
        self.tool = tool or ScriptQueue()

    @staticmethod
    def _queue(spec: Any) -> ScriptQueue:
        if isinstance(spec, Mapping):
            return ScriptQueue(spec.get("entries", []), cycle=bool(spec.get("cycle", False)))
        return ScriptQueue(spec)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScriptedBehavior":
        unknown = set(d) - {p.value for p in Purpose} - {"tool"}
        if unknown:
            raise ValueError(f"unknown script purposes: {sorted(unknown)}")
        queues = {Purpose(k): cls._queue(v) for k, v in d.items() if k != "tool"}
        tool = cls._queue(d["tool"]) if "tool" in d else None
        return cls(queues, tool)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ScriptedBehavior":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def queue(self, purpose: Purpose) -> ScriptQueue:
        return self.queues.setdefault(purpose, ScriptQueue())


_MALFORMED = "<<malformed output>>"


class MockBackend:
    """Scripted backend on a simulated clock.

    Each request pops the next entry for its purpose; the result becomes
    visible when the clock reaches submit time + scripted latency.
    """

    def __init__(
        self,
        script: ScriptedBehavior,
        scheduler: SimScheduler | None = None,
        tokenizer: Tokenizer | None = None,
    ):
        self.script = script
        self.scheduler = scheduler or SimScheduler()
        self.tokenizer = tokenizer
        self.requests: list[GenerationRequest] = []

    def now(self) -> float:
        return self.scheduler.now()

    def submit(self, req: GenerationRequest) -> Job:
        queue = self.script.queue(req.purpose)
        entry = queue.pop(req)
        self.requests.append(req)
        latency = float(entry.get("latency_s", 0.0))
        fail = entry.get("fail")
        error: BaseException | None = None
        content = entry.get("content", "")
        if fail == "timeout":
            error = BackendTimeout(f"injected timeout on {req.purpose.value}")
        elif fail == "error":
            error = TransportError(f"injected transport error on {req.purpose.value}")
        elif fail == "malformed":
            content = content or _MALFORMED
        elif fail:
            raise ValueError(f"unknown failure injection {fail!r}")
        value = None
        if error is None:
            value = GenerationResponse(content, count_tokens(content, self.tokenizer), latency, entry.get("tool_call"))

        def _undo() -> None:
            queue.unpop()
            self.requests.remove(req)

        return self.scheduler.submit(
            latency, value, error=error, priority=_PRIORITY[req.purpose], tag=req.purpose, on_cancel=_undo
        )

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        return self.scheduler.wait(self.submit(req))


class ScriptedTools:
    """Tool executor replaying scripted observations on the simulated clock."""

    def __init__(self, queue: ScriptQueue, scheduler: SimScheduler):
        self.queue = queue
        self.scheduler = scheduler

    def submit(self, call: str) -> Job:
        entry = self.queue.pop(GenerationRequest([{"role": "user", "content": call}], Purpose.AGENT_STEP))
        latency = float(entry.get("latency_s", 0.0))
        return self.scheduler.submit(
            latency, ToolResult(entry.get("content", ""), latency), priority=TOOL_PRIORITY, tag="tool"
        )


class CallableTools:
    """Tool executor running a user callable on the thread scheduler."""

    def __init__(self, fn: Callable[[str], str], scheduler: ThreadScheduler):
        self.fn = fn
        self.scheduler = scheduler

    def submit(self, call: str) -> Job:
        def _run() -> ToolResult:
            t0 = time.monotonic()
            out = self.fn(call)
            return ToolResult(out, time.monotonic() - t0)

        return self.scheduler.submit_call(_run, tag="tool")


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP client


class HttpBackend:
    """Client for ``POST {base_url}/v1/chat/completions``.

    One retry on transport errors and 5xx responses; 4xx responses are not
    retried. Sampling options are forwarded untouched.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: str | None = None,
        sampling: Mapping[str, Any] | None = None,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        scheduler: ThreadScheduler | None = None,
    ):
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.sampling = dict(sampling or {})
        self.client = client or httpx.Client(timeout=timeout)
        self.scheduler = scheduler or ThreadScheduler()

    def now(self) -> float:
        return self.scheduler.now()

    def _body(self, req: GenerationRequest) -> dict:
        body = {**self.sampling, **req.sampling}
        body.update(model=self.model, messages=req.messages, max_tokens=req.max_output_tokens)
        return body

    def _post(self, body: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last: Exception | None = None
        for attempt in range(2):
            try:
                resp = self.client.post(self.url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(str(exc))
            except httpx.TransportError as exc:
                last = TransportError(str(exc))
            else:
                if 400 <= resp.status_code < 500:
                    raise UpstreamRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code >= 500:
                    last = TransportError(f"HTTP {resp.status_code}")
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise BackendError(f"non-JSON response: {exc}") from exc
            logger.warning("chat completion attempt %d failed: %s", attempt + 1, last)
        assert last is not None
        raise last

    def _call(self, req: GenerationRequest) -> GenerationResponse:
        t0 = time.monotonic()
        payload = self._post(self._body(req))
        latency = time.monotonic() - t0
        try:
            message = payload["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected completion payload: {payload!r:.200}") from exc
        content = message.get("content") or ""
        usage = payload.get("usage") or {}
        output_tokens = usage.get("completion_tokens")
        if output_tokens is None:
            output_tokens = count_tokens(content)
        tool_call = None
        calls = message.get("tool_calls") or []
        if calls:
            fn = calls[0].get("function", {})
            tool_call = f"{fn.get('name', '')}({fn.get('arguments', '')})"
        return GenerationResponse(content, int(output_tokens), latency, tool_call)

    def submit(self, req: GenerationRequest) -> Job:
        return self.scheduler.submit_call(lambda: self._call(req), tag=req.purpose)

    def generate(self, req: GenerationRequest) -> GenerationResponse:
        return self._call(req)
