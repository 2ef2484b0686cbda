"""Agent loop with synchronous or overlapped, judge-validated compaction.

The agent runs reason-then-act turns on a :class:`TrajectoryContext`. When the
context reaches the threshold, one of three compaction schemes runs:

``sync``
    Stepping blocks while the compactor runs; the summary replaces the context.
``async_nojudge``
    The compactor runs on a snapshot while the agent keeps stepping on the
    uncompacted context. Whatever comes back is adopted together with the
    turns completed meanwhile.
``slipstream``
    As ``async_nojudge``, but the candidate is first checked by the judge
    against those turns. A rejected candidate gets a targeted update; if that
    fails, a blocking compaction of the live context is the fallback.

Mode ``none`` never compacts and serves as the latency baseline.

A turn still generating its reasoning when the compactor returns is abandoned
and re-issued on the adopted context; a turn whose tool call is already
executing is allowed to finish and joins the window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

from .compactor import (
    CompactionCandidate,
    FaultSchedule,
    build_compaction_request,
    candidate_from_response,
    check_compression,
)
from .context_store import (
    ContextSnapshot,
    Role,
    Step,
    Tokenizer,
    TrajectoryContext,
    count_tokens,
    should_compact,
    snapshot,
)
from .errors import (
    BackendError,
    CompactionFailed,
    ConfigError,
    LifecycleInvariantError,
    PreconditionError,
    UpdateFailed,
    VerdictParseError,
)
from .judge import (
    Decision,
    JudgeVerdict,
    SpeculativeWindow,
    build_judge_request,
    decide,
    parse_verdict,
    serialize_window,
)
from .llm_backend import GenerationRequest, Job, Purpose
from .metrics import CompactionEvent, Outcome, dumps_records
from .oracles import SUMMARY_HEADER

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    NONE = "none"
    SYNC = "sync"
    ASYNC_NOJUDGE = "async_nojudge"
    SLIPSTREAM = "slipstream"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        return cls(value.replace("-", "_") if isinstance(value, str) else value)


@dataclass
class RunConfig:
    mode: Mode = Mode.SLIPSTREAM
    threshold: int = 6000
    accept_threshold: int = 7
    k_max: int = 8
    max_update_attempts: int = 1
    seed: int = 0
    max_turns: int = 500
    judge_retries: int = 1
    judge_sees_observations: bool = False

    def __post_init__(self) -> None:
        try:
            self.mode = Mode.parse(self.mode)
        except ValueError:
            raise ConfigError([f"mode: unknown mode {self.mode!r}"]) from None
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.threshold, int) or self.threshold <= 0:
            out.append(f"threshold: must be a positive integer, got {self.threshold!r}")
        if not isinstance(self.accept_threshold, int) or not 0 <= self.accept_threshold <= 10:
            out.append(f"accept_threshold: must be an integer in [0, 10], got {self.accept_threshold!r}")
        if not isinstance(self.k_max, int) or self.k_max < 1:
            out.append(f"k_max: must be a positive integer, got {self.k_max!r}")
        if not isinstance(self.max_update_attempts, int) or self.max_update_attempts < 0:
            out.append(f"max_update_attempts: must be a nonnegative integer, got {self.max_update_attempts!r}")
        if not isinstance(self.max_turns, int) or self.max_turns < 1:
            out.append(f"max_turns: must be a positive integer, got {self.max_turns!r}")
        return out


# ---------------------------------------------------------------------------
# targeted update

UPDATE_INSTRUCTION = """\
A judge rejected the candidate compacted state below because it is inconsistent with \
the steps the agent actually took on the full context. Repair it minimally: restore \
omitted facts, constraints and pending items, and correct mutated instructions or \
entities, using the diagnosis and the evidence. Keep everything else unchanged; do not \
re-summarize from scratch. Output only the repaired compacted state."""


def build_update_request(candidate: CompactionCandidate, diagnosis: str, window: SpeculativeWindow) -> GenerationRequest:
    if not diagnosis or not diagnosis.strip():
        raise PreconditionError("targeted update needs a nonempty diagnosis")
    evidence = serialize_window(window.steps, include_observations=True)
    prompt = (
        f"{UPDATE_INSTRUCTION}\n\n---\n{SUMMARY_HEADER}{candidate.summary}\n\n---\n"
        f"JUDGE DIAGNOSIS:\n{diagnosis}\n\n---\n"
        f"EVIDENCE (steps taken on the uncompacted context):\n{evidence}\n"
    )
    return GenerationRequest([{"role": "user", "content": prompt}], Purpose.TARGETED_UPDATE)


def targeted_update(
    candidate: CompactionCandidate,
    diagnosis: str,
    window: SpeculativeWindow,
    backend,
    tokenizer: Tokenizer | None = None,
) -> CompactionCandidate:
    """One repair call. Raises :class:`UpdateFailed` on backend error or lost compression."""
    req = build_update_request(candidate, diagnosis, window)
    try:
        resp = backend.generate(req)
    except BackendError as exc:
        raise UpdateFailed(f"update backend failed: {exc}") from exc
    summary = resp.content.strip()
    if not summary:
        raise UpdateFailed("targeted update returned an empty summary")
    try:
        check_compression(summary, candidate.source_tokens, tokenizer)
    except CompactionFailed as exc:
        raise UpdateFailed(str(exc)) from exc
    return CompactionCandidate(
        summary,
        candidate.source_snapshot_id,
        backend.now(),
        candidate.compaction_latency + resp.latency,
        candidate.source_tokens,
        candidate.corruptions,
    )


# ---------------------------------------------------------------------------
# run bookkeeping


@dataclass
class Lifecycle:
    """In-memory record of one compaction, kept for inspection and tests."""

    event: CompactionEvent
    candidate: CompactionCandidate | None = None
    window: SpeculativeWindow | None = None
    adopted: ContextSnapshot | None = None


@dataclass
class RunResult:
    query: str | None
    context: TrajectoryContext
    records: list[dict]
    lifecycles: list[Lifecycle]
    total_time: float
    turns: int
    finished: bool
    error: str | None = None

    @property
    def events(self) -> list[CompactionEvent]:
        return [lc.event for lc in self.lifecycles]

    def trace_jsonl(self) -> str:
        return dumps_records(self.records)


class _AgentFailure(Exception):
    pass


@dataclass
class _Turn:
    number: int
    job: Job
    started: float
    phase: str = "reason"
    reasoning: Step | None = None
    reason_latency: float = 0.0
    tool_call: str | None = None
    tool_started: float = 0.0


def is_finish_call(call: str | None) -> bool:
    return bool(call) and call.split("(", 1)[0].strip() == "finish"


class Orchestrator:
    """Runs one agent task under a :class:`RunConfig`.

    ``backend`` serves every generation purpose; ``tools`` executes tool calls
    on the same scheduler. ``faults`` is the opt-in fault-injection schedule
    applied to fresh compaction candidates.
    """

    def __init__(
        self,
        backend,
        cfg: RunConfig,
        *,
        tools=None,
        system_preamble: str = "",
        tokenizer: Tokenizer | None = None,
        faults: FaultSchedule | None = None,
        query: str | None = None,
    ):
        self.backend = backend
        self.cfg = cfg
        self.tools = tools
        self.system_preamble = system_preamble
        self.tokenizer = tokenizer
        self.faults = faults
        self.query = query
        self.scheduler = backend.scheduler
        self.records: list[dict] = []
        self.lifecycles: list[Lifecycle] = []
        self.turns = 0
        self._in_flight: str | None = None

    # -- helpers -----------------------------------------------------------

    def now(self) -> float:
        return self.scheduler.now()

    def _new_context(self) -> TrajectoryContext:
        if self.tokenizer is None:
            return TrajectoryContext(self.system_preamble)
        return TrajectoryContext(self.system_preamble, tokenizer=self.tokenizer)

    def _interval(self, kind: str, start: float, end: float, **extra) -> None:
        if end > start:
            self.records.append({"type": "interval", "kind": kind, "start": start, "end": end, **extra})

    def _snapshot_id(self) -> str:
        return f"{self.query or 'run'}-c{len(self.lifecycles)}"

    # -- agent turns -------------------------------------------------------

    def _start_turn(self, ctx: TrajectoryContext) -> _Turn:
        self.turns += 1
        req = GenerationRequest(ctx.messages(), Purpose.AGENT_STEP)
        try:
            job = self.backend.submit(req)
        except BackendError as exc:
            raise _AgentFailure(f"turn {self.turns}: {exc}") from exc
        return _Turn(self.turns, job, self.now())

    def _advance_turn(self, turn: _Turn, ctx: TrajectoryContext) -> tuple[list[Step], bool] | None:
        """Handle completion of the turn's current job.

        Returns ``(steps, finished)`` once the whole turn is done, or None
        after dispatching its tool call.
        """
        try:
            out = turn.job.result()
        except BackendError as exc:
            raise _AgentFailure(f"turn {turn.number}: {exc}") from exc
        now = self.now()
        if turn.phase == "reason":
            self._interval("agent_reasoning", turn.started, now, turn=turn.number)
            turn.reasoning = ctx.make_step(Role.AGENT_REASONING, out.content, out.latency)
            turn.reason_latency = out.latency
            turn.tool_call = out.tool_call
            if out.tool_call and not is_finish_call(out.tool_call):
                if self.tools is None:
                    raise _AgentFailure(f"turn {turn.number} issued a tool call but no tool executor is configured")
                turn.phase = "tool"
                turn.tool_started = now
                try:
                    turn.job = self.tools.submit(out.tool_call)
                except BackendError as exc:
                    raise _AgentFailure(f"turn {turn.number} tool call: {exc}") from exc
                return None
            steps = [turn.reasoning]
            if out.tool_call:
                steps.append(self._step(ctx, steps, Role.TOOL_CALL, out.tool_call))
            return steps, is_finish_call(out.tool_call) or self.turns >= self.cfg.max_turns
        self._interval("action_execution", turn.tool_started, now, turn=turn.number)
        steps = [turn.reasoning]
        steps.append(self._step(ctx, steps, Role.TOOL_CALL, turn.tool_call))
        steps.append(self._step(ctx, steps, Role.TOOL_OBSERVATION, out.observation, out.latency))
        return steps, self.turns >= self.cfg.max_turns

    def _step(self, ctx, pending: list[Step], role: Role, content: str, wall_time: float = 0.0) -> Step:
        return Step.build(len(ctx.steps) + len(pending), role, content, wall_time, ctx.tokenizer)

    def _finish_turn_blocking(self, turn: _Turn, ctx: TrajectoryContext) -> tuple[list[Step], bool]:
        while True:
            self.scheduler.wait_first([turn.job])
            done = self._advance_turn(turn, ctx)
            if done is not None:
                return done

    @staticmethod
    def _append(ctx: TrajectoryContext, steps: list[Step]) -> None:
        for s in steps:
            ctx.append_step(s)

    # -- main loop ---------------------------------------------------------

    def run(self, task: str) -> RunResult:
        ctx = self._new_context()
        ctx.add(Role.USER, task)
        t0 = self.now()
        self.records.append(
            {
                "type": "run_start",
                "query": self.query,
                "mode": self.cfg.mode.value,
                "threshold": self.cfg.threshold,
                "seed": self.cfg.seed,
                "time": t0,
            }
        )
        finished = False
        just_compacted = False
        error = None
        try:
            while not finished and self.turns < self.cfg.max_turns:
                if (
                    self.cfg.mode is not Mode.NONE
                    and not just_compacted
                    and should_compact(ctx, self.cfg.threshold)
                ):
                    ctx, finished = self._compaction(ctx)
                    just_compacted = True
                    continue
                steps, finished = self._finish_turn_blocking(self._start_turn(ctx), ctx)
                self._append(ctx, steps)
                just_compacted = False
        except _AgentFailure as exc:
            error = str(exc)
            logger.error("agent run aborted: %s", error)
        end = self.now()
        self.records.append(
            {"type": "run_end", "time": end, "turns": self.turns, "finished": finished, "error": error}
        )
        return RunResult(self.query, ctx, self.records, self.lifecycles, end - t0, self.turns, finished, error)

    def _compaction(self, ctx: TrajectoryContext) -> tuple[TrajectoryContext, bool]:
        if self._in_flight is not None:
            raise LifecycleInvariantError(f"compaction triggered while {self._in_flight} is in flight")
        ev = CompactionEvent(self._snapshot_id(), self.cfg.mode.value, self.query, len(self.lifecycles))
        lc = Lifecycle(ev)
        self.lifecycles.append(lc)
        self._in_flight = ev.snapshot_id
        try:
            if self.cfg.mode is Mode.SYNC:
                return self._sync_lifecycle(ctx, lc), False
            return self._async_lifecycle(ctx, lc)
        finally:
            self._in_flight = None
            problems = ev.check()
            self.records.append(ev.to_record())
            if problems:
                raise LifecycleInvariantError(f"{ev.snapshot_id}: " + "; ".join(problems))

    # -- synchronous -------------------------------------------------------

    def _blocking_compact(self, ctx: TrajectoryContext, snapshot_id: str) -> CompactionCandidate:
        snap = snapshot(ctx, snapshot_id)
        start = self.now()
        try:
            resp = self.backend.generate(build_compaction_request(snap))
        except BackendError as exc:
            raise CompactionFailed(f"compactor backend failed: {exc}") from exc
        finally:
            self._interval("blocking_compaction", start, self.now())
        return candidate_from_response(resp, snap, self.now(), self.tokenizer)

    def _sync_lifecycle(self, ctx: TrajectoryContext, lc: Lifecycle) -> TrajectoryContext:
        ev = lc.event
        ev.trigger_time = ev.compactor_start = self.now()
        ev.source_tokens = ctx.active_tokens
        try:
            cand = self._blocking_compact(ctx, ev.snapshot_id)
        except CompactionFailed as exc:
            ev.compactor_end = self.now()
            ev.outcome, ev.error = Outcome.DISCARDED, str(exc)
            return ctx
        ev.compactor_end = self.now()
        cand = self._inject(cand, ev)
        lc.candidate = cand
        new = self._adopt(cand, (), lc)
        ev.outcome = Outcome.ADOPTED
        return new

    # -- overlapped --------------------------------------------------------

    def _async_lifecycle(self, ctx: TrajectoryContext, lc: Lifecycle) -> tuple[TrajectoryContext, bool]:
        ev = lc.event
        snap = snapshot(ctx, ev.snapshot_id)
        ev.trigger_time = ev.compactor_start = self.now()
        ev.source_tokens = snap.active_tokens
        try:
            cjob = self.backend.submit(build_compaction_request(snap))
        except BackendError as exc:
            ev.compactor_end, ev.k = self.now(), 0
            ev.outcome, ev.error = Outcome.DISCARDED, f"compactor submission failed: {exc}"
            return ctx, False
        window: list[Step] = []
        k = 0
        turn: _Turn | None = None
        finished = False
        stall_start = None

        try:
            while True:
                if turn is None and k < self.cfg.k_max and self.turns < self.cfg.max_turns:
                    turn = self._start_turn(ctx)
                elif turn is None and stall_start is None:
                    stall_start = self.now()
                    ev.stalled = True
                    self.records.append({"type": "stall", "snapshot_id": ev.snapshot_id, "time": stall_start})
                    logger.info("%s: window cap reached, waiting on compactor", ev.snapshot_id)
                first = self.scheduler.wait_first([cjob] if turn is None else [cjob, turn.job])
                if first is cjob:
                    break
                done = self._advance_turn(turn, ctx)
                if done is None:
                    continue
                steps, finished = done
                self._append(ctx, steps)
                window.extend(steps)
                k += 1
                turn = None
                if finished:
                    break

            if not finished:
                ev.compactor_end = self.now()
                if stall_start is not None:
                    self._interval("blocking_compaction", stall_start, ev.compactor_end, stall=True)
                if turn is not None:
                    if turn.phase == "reason":
                        self.scheduler.cancel(turn.job)
                        self._interval("agent_reasoning", turn.started, self.now(), turn=turn.number, abandoned=True)
                        self.turns -= 1
                    else:
                        steps, finished = self._finish_turn_blocking(turn, ctx)
                        self._append(ctx, steps)
                        window.extend(steps)
                    turn = None
        except _AgentFailure as exc:
            self.scheduler.cancel(cjob)
            ev.compactor_end = ev.compactor_end or self.now()
            ev.k = SpeculativeWindow(tuple(window), snap.snapshot_id).k
            ev.outcome, ev.error = Outcome.DISCARDED, str(exc)
            raise

        self._interval("overlapped_compaction", ev.compactor_start, ev.compactor_end or self.now())
        if finished:
            self.scheduler.cancel(cjob)
            ev.compactor_end = ev.compactor_end or self.now()
            ev.k = SpeculativeWindow(tuple(window), snap.snapshot_id).k
            ev.outcome, ev.error = Outcome.DISCARDED, "task completed while compaction was in flight"
            return ctx, True

        win = SpeculativeWindow(tuple(window), snap.snapshot_id)
        lc.window = win
        ev.k = win.k
        try:
            cand = candidate_from_response(cjob.result(), snap, ev.compactor_end, self.tokenizer)
        except (BackendError, CompactionFailed) as exc:
            ev.outcome, ev.error = Outcome.DISCARDED, str(exc)
            return ctx, False
        cand = self._inject(cand, ev)
        lc.candidate = cand

        if self.cfg.mode is Mode.ASYNC_NOJUDGE or win.k == 0:
            ev.outcome = Outcome.ADOPTED
            return self._adopt(cand, win.steps, lc), False

        decision = self._judge(cand, win, ev)
        if decision.accepted:
            ev.outcome = Outcome.ADOPTED
            return self._adopt(cand, win.steps, lc), False

        updated = self._update(cand, decision.diagnosis, win, ev)
        if updated is not None:
            lc.candidate = updated
            ev.outcome = Outcome.ADOPTED_AFTER_UPDATE
            return self._adopt(updated, win.steps, lc), False

        ev.outcome = Outcome.SYNC_FALLBACK
        ev.fallback_start = self.now()
        try:
            fallback = self._blocking_compact(ctx, ev.snapshot_id + "-fallback")
        except CompactionFailed as exc:
            ev.fallback_end = self.now()
            # nothing was adopted, so the lifecycle counts as discarded
            ev.outcome, ev.error = Outcome.DISCARDED, f"fallback compaction failed: {exc}"
            return ctx, False
        ev.fallback_end = self.now()
        lc.candidate = fallback
        return self._adopt(fallback, (), lc), False

    def _judge(self, cand: CompactionCandidate, window: SpeculativeWindow, ev: CompactionEvent) -> Decision:
        ev.judge_start = self.now()
        req = build_judge_request(cand, window, self.cfg.judge_sees_observations)
        evidence = serialize_window(window.steps, self.cfg.judge_sees_observations)
        ev.judge_input_tokens = count_tokens(cand.summary, self.tokenizer) + count_tokens(evidence, self.tokenizer)
        verdict: JudgeVerdict | None = None
        problem = ""
        for _ in range(1 + self.cfg.judge_retries):
            ev.judge_attempts += 1
            try:
                verdict = parse_verdict(self.backend.generate(req).content)
                break
            except (BackendError, VerdictParseError) as exc:
                problem = str(exc)
                logger.warning("%s: judge attempt %d failed: %s", ev.snapshot_id, ev.judge_attempts, exc)
        ev.judge_end = self.now()
        self._interval("judge_update", ev.judge_start, ev.judge_end, phase="judge")
        if verdict is None:
            decision = Decision(False, f"judge verdict unusable ({problem}); re-check every fact the trajectory uses")
        else:
            ev.verdict = verdict.to_dict()
            decision = decide(verdict, self.cfg.accept_threshold)
        ev.decision = decision.kind
        return decision

    def _update(self, cand, diagnosis: str, window: SpeculativeWindow, ev: CompactionEvent) -> CompactionCandidate | None:
        if self.cfg.max_update_attempts == 0:
            return None
        ev.update_start = self.now()
        result = None
        for _ in range(self.cfg.max_update_attempts):
            ev.update_attempts += 1
            try:
                result = targeted_update(cand, diagnosis, window, self.backend, self.tokenizer)
                break
            except UpdateFailed as exc:
                ev.error = str(exc)
        ev.update_end = self.now()
        self._interval("judge_update", ev.update_start, ev.update_end, phase="update")
        if result is not None:
            ev.error = None
        return result

    # -- adoption ----------------------------------------------------------

    def _inject(self, cand: CompactionCandidate, ev: CompactionEvent) -> CompactionCandidate:
        if self.faults is None:
            return cand
        cand = self.faults.apply(cand, self.query, ev.index)
        ev.corruptions = list(cand.corruptions)
        return cand

    def _adopt(self, cand: CompactionCandidate, window_steps, lc: Lifecycle) -> TrajectoryContext:
        new = self._new_context()
        new.add(Role.SUMMARY, cand.summary, cand.compaction_latency)
        for s in window_steps:
            new.append_step(s.with_index(len(new.steps)))
        expected = [(Role.SUMMARY, cand.summary)] + [(s.role, s.content) for s in window_steps]
        if [(s.role, s.content) for s in new.steps] != expected or new.active_tokens != new.recount():
            raise LifecycleInvariantError(f"{lc.event.snapshot_id}: adopted context does not match candidate + window")
        lc.event.adopt_time = self.now()
        lc.event.summary_tokens = new.steps[0].token_count
        lc.adopted = snapshot(new, lc.event.snapshot_id + "-adopted")
        return new

    # convenience wrappers over a single lifecycle ----------------------------

    def run_sync_compaction(self, ctx: TrajectoryContext) -> TrajectoryContext:
        return self._single(ctx, Mode.SYNC)

    def run_slipstream_compaction(self, ctx: TrajectoryContext) -> TrajectoryContext:
        return self._single(ctx, Mode.SLIPSTREAM)

    def run_async_nojudge(self, ctx: TrajectoryContext) -> TrajectoryContext:
        return self._single(ctx, Mode.ASYNC_NOJUDGE)

    def _single(self, ctx: TrajectoryContext, mode: Mode) -> TrajectoryContext:
        if not should_compact(ctx, self.cfg.threshold):
            raise PreconditionError("context has not reached the compaction threshold")
        saved = self.cfg.mode
        self.cfg.mode = mode
        try:
            return self._compaction(ctx)[0]
        finally:
            self.cfg.mode = saved
