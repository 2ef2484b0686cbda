"""Trace records and the measurements aggregated from them.

A run trace is JSONL. Record types (field ``type``):

``run_start``   {query, mode, threshold, seed, time}
``interval``    {kind, start, end}: ``kind`` is one of agent_reasoning,
                action_execution, blocking_compaction, overlapped_compaction,
                judge_update. All but overlapped_compaction partition the
                critical path.
``stall``       {snapshot_id, time}: stepping paused at the window cap
``compaction``  one :class:`CompactionEvent`
``run_end``     {time, turns, finished, error}
"""

from __future__ import annotations

import glob
import json
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import LabelingError, TraceParseError, UndefinedRateError


class Outcome(str, Enum):
    ADOPTED = "adopted"
    ADOPTED_AFTER_UPDATE = "adopted_after_update"
    SYNC_FALLBACK = "sync_fallback"
    DISCARDED = "discarded"


CRITICAL_KINDS = ("agent_reasoning", "action_execution", "blocking_compaction", "judge_update")
INTERVAL_KINDS = CRITICAL_KINDS + ("overlapped_compaction",)

# lifecycle order for the nondecreasing-timestamp invariant
_PHASES = (
    "trigger_time",
    "compactor_start",
    "compactor_end",
    "judge_start",
    "judge_end",
    "update_start",
    "update_end",
    "fallback_start",
    "fallback_end",
    "adopt_time",
)


@dataclass
class CompactionEvent:
    snapshot_id: str
    mode: str
    query: str | None = None
    index: int = 0
    trigger_time: float | None = None
    compactor_start: float | None = None
    compactor_end: float | None = None
    judge_start: float | None = None
    judge_end: float | None = None
    update_start: float | None = None
    update_end: float | None = None
    fallback_start: float | None = None
    fallback_end: float | None = None
    adopt_time: float | None = None
    k: int | None = None
    verdict: dict | None = None
    decision: str | None = None
    outcome: Outcome | None = None
    source_tokens: int | None = None
    summary_tokens: int | None = None
    judge_input_tokens: int | None = None
    judge_attempts: int = 0
    update_attempts: int = 0
    stalled: bool = False
    corruptions: list[str] = field(default_factory=list)
    error: str | None = None

    def check(self) -> list[str]:
        problems = []
        stamps = [(p, getattr(self, p)) for p in _PHASES if getattr(self, p) is not None]
        for (p1, t1), (p2, t2) in zip(stamps, stamps[1:]):
            if t2 < t1:
                problems.append(f"{p2}={t2} precedes {p1}={t1}")
        if (self.k is None) != (self.mode == "sync"):
            problems.append("k must be present iff mode is not sync")
        if self.outcome is None:
            problems.append("lifecycle has no outcome")
        return problems

    def to_record(self) -> dict:
        d = asdict(self)
        d["outcome"] = self.outcome.value if self.outcome else None
        d["type"] = "compaction"
        return d

    @classmethod
    def from_record(cls, rec: Mapping) -> "CompactionEvent":
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in rec.items() if k in names}
        if kwargs.get("outcome") is not None:
            kwargs["outcome"] = Outcome(kwargs["outcome"])
        return cls(**kwargs)


@dataclass(frozen=True)
class LatencyBreakdown:
    agent_reasoning: float = 0.0
    action_execution: float = 0.0
    blocking_compaction: float = 0.0
    overlapped_compaction: float = 0.0
    judge_update: float = 0.0
    total: float = 0.0

    @property
    def compaction_share(self) -> float:
        return self.blocking_compaction / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def dumps_records(records: Iterable[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def read_trace(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict) or "type" not in rec:
                raise TraceParseError(f"{path}:{lineno}: record has no 'type'")
            records.append(rec)
    return records


def _records(trace) -> list[dict]:
    if isinstance(trace, (str, os.PathLike)):
        return read_trace(trace)
    return list(trace)


_US = 1_000_000


def _us(t: float) -> int:
    return round(t * _US)


def breakdown(trace) -> LatencyBreakdown:
    """Sum the critical-path intervals of one trace (path or record list)."""
    sums: dict[str, int] = dict.fromkeys(INTERVAL_KINDS, 0)
    start = end = None
    for n, rec in enumerate(_records(trace), 1):
        kind = rec.get("type")
        if kind == "interval":
            try:
                k = rec["kind"]
                span = _us(rec["end"]) - _us(rec["start"])
            except (KeyError, TypeError) as exc:
                raise TraceParseError(f"record {n}: malformed interval {rec!r}") from exc
            if k not in sums or span < 0:
                raise TraceParseError(f"record {n}: bad interval kind or negative span: {rec!r}")
            sums[k] += span
        elif kind == "run_start":
            start = rec.get("time")
        elif kind == "run_end":
            end = rec.get("time")
    total = sum(sums[k] for k in CRITICAL_KINDS)
    if start is not None and end is not None and abs((_us(end) - _us(start)) - total) > 1:
        raise TraceParseError(
            f"critical-path intervals sum to {total / _US}s but the run spans {end - start}s"
        )
    return LatencyBreakdown(**{k: v / _US for k, v in sums.items()}, total=total / _US)


def compaction_events(trace) -> list[CompactionEvent]:
    return [CompactionEvent.from_record(r) for r in _records(trace) if r.get("type") == "compaction"]


def rejection_rate(traces: Iterable) -> float:
    judged = rejected = 0
    for trace in traces:
        for ev in compaction_events(trace):
            if ev.decision is None:
                continue
            judged += 1
            rejected += ev.decision == "reject"
    if judged == 0:
        raise UndefinedRateError("no judged compactions in the given traces")
    return rejected / judged


@dataclass(frozen=True)
class LocalityHistogram:
    """Counts of first-deviation offsets (steps after compaction)."""

    counts: dict[int, int]
    n: int

    def cdf(self, k: int) -> float:
        if self.n == 0:
            return 0.0
        return sum(c for off, c in self.counts.items() if off <= k) / self.n

    def to_dict(self) -> dict:
        top = max(self.counts, default=0)
        return {
            "n": self.n,
            "counts": {str(k): self.counts[k] for k in sorted(self.counts)},
            "cdf": {str(k): self.cdf(k) for k in range(1, top + 1)},
        }


def deviation_locality(labels: Iterable[Mapping]) -> LocalityHistogram:
    """Histogram of ``first_deviation_step - compaction_step``.

    Each label needs either ``offset`` or both ``compaction_step`` and
    ``first_deviation_step``. A null ``first_deviation_step`` (or ``offset``)
    means no deviation was observed and the label is not counted.
    """
    counts: Counter[int] = Counter()
    for i, lab in enumerate(labels):
        if "offset" in lab:
            offset = lab["offset"]
        elif "compaction_step" in lab and "first_deviation_step" in lab:
            dev = lab["first_deviation_step"]
            offset = None if dev is None else dev - lab["compaction_step"]
        else:
            raise LabelingError(f"label {i} lacks offset or compaction_step/first_deviation_step: {lab!r}")
        if offset is None:
            continue
        if isinstance(offset, bool) or not isinstance(offset, int) or offset < 1:
            raise LabelingError(f"label {i}: deviation offset must be a positive integer, got {offset!r}")
        counts[offset] += 1
    return LocalityHistogram(dict(counts), sum(counts.values()))


# ---------------------------------------------------------------------------
# reports


def _run_key(records: Sequence[Mapping]) -> tuple[str, int | None]:
    for r in records:
        if r.get("type") == "run_start":
            return r.get("mode", "?"), r.get("threshold")
    return "?", None


def report(paths: Sequence[str]) -> dict:
    """Group traces by (mode, threshold) and aggregate them.

    Shares are given both as the mean of per-query shares and pooled over
    all queries of the group.
    """
    groups: dict[tuple, list[list[dict]]] = defaultdict(list)
    for p in paths:
        recs = read_trace(p)
        groups[_run_key(recs)].append(recs)
    out = []
    for (mode, threshold), runs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        bds = [breakdown(r) for r in runs]
        pooled_total = sum(b.total for b in bds)
        parts = {k: sum(getattr(b, k) for b in bds) for k in INTERVAL_KINDS}
        outcomes = Counter(e.outcome.value for r in runs for e in compaction_events(r) if e.outcome)
        try:
            rate = rejection_rate(runs)
        except UndefinedRateError:
            rate = None
        out.append(
            {
                "mode": mode,
                "threshold": threshold,
                "queries": len(runs),
                "mean_total_s": pooled_total / len(runs),
                "mean_share": {k: sum(getattr(b, k) / b.total for b in bds if b.total) / len(bds) for k in INTERVAL_KINDS},
                "pooled_share": {k: (parts[k] / pooled_total if pooled_total else 0.0) for k in INTERVAL_KINDS},
                "outcomes": dict(sorted(outcomes.items())),
                "rejection_rate": rate,
            }
        )
    return {"groups": out}


def format_table(rep: Mapping) -> str:
    cols = ["mode", "T", "n", "total_s", "reason", "action", "block_cmp", "overlap_cmp", "judge_upd", "reject"]
    rows = []
    for g in rep["groups"]:
        s = g["pooled_share"]
        rows.append(
            [
                g["mode"],
                str(g["threshold"]),
                str(g["queries"]),
                f"{g['mean_total_s']:.2f}",
                f"{s['agent_reasoning']:.1%}",
                f"{s['action_execution']:.1%}",
                f"{s['blocking_compaction']:.1%}",
                f"{s['overlapped_compaction']:.1%}",
                f"{s['judge_update']:.1%}",
                "-" if g["rejection_rate"] is None else f"{g['rejection_rate']:.1%}",
            ]
        )
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)
    return "\n".join(lines) + "\n"


def expand_globs(patterns: Iterable[str]) -> list[str]:
    paths: list[str] = []
    for pat in patterns:
        paths.extend(sorted(glob.glob(pat, recursive=True)))
    return paths
