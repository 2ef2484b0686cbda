from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import text
from trajcompact.compactor import (
    COMPACTION_INSTRUCTION,
    CompactionCandidate,
    CorruptionMode,
    CorruptionSpec,
    FaultSchedule,
    build_compaction_request,
    classify,
    compact,
    corrupt,
    corrupt_text,
)
from trajcompact.context_store import Role, TrajectoryContext, count_tokens, snapshot
from trajcompact.errors import CompactionFailed, InjectionError, PreconditionError
from trajcompact.llm_backend import MockBackend, Purpose, ScriptedBehavior


def ctx_with(*contents, preamble="sys"):
    ctx = TrajectoryContext(preamble)
    for c in contents:
        ctx.add(Role.AGENT_REASONING, c)
    return ctx


def test_request_embeds_steps_in_order():
    snap = snapshot(ctx_with("one", "two", "three"), "s")
    req = build_compaction_request(snap)
    assert req.purpose is Purpose.COMPACTION
    assert [m["content"] for m in req.messages[1:4]] == ["one", "two", "three"]
    assert req.messages[-1] == {"role": "user", "content": COMPACTION_INSTRUCTION}
    assert "[PENDING]" in COMPACTION_INSTRUCTION and "[OPEN]" in COMPACTION_INSTRUCTION


def test_empty_snapshot_rejected():
    with pytest.raises(PreconditionError):
        build_compaction_request(snapshot(TrajectoryContext("sys"), "e"))


@given(st.lists(st.text(max_size=300), min_size=1, max_size=15))
def test_request_tokens_are_source_plus_instruction(contents):
    snap = snapshot(ctx_with(*contents), "s")
    req = build_compaction_request(snap)
    recount = sum(count_tokens(m["content"]) for m in req.messages)
    assert recount == snap.active_tokens + count_tokens(COMPACTION_INSTRUCTION)


def test_request_tokens_bounded_with_wire_prefixes():
    ctx = ctx_with("think")
    ctx.add(Role.TOOL_CALL, "ls()")
    ctx.add(Role.TOOL_OBSERVATION, "x" * 40)
    snap = snapshot(ctx, "s")
    recount = sum(count_tokens(m["content"]) for m in build_compaction_request(snap).messages)
    prefix_overhead = count_tokens("[tool_call] ") + count_tokens("[observation] ")
    assert recount <= snap.active_tokens + count_tokens(COMPACTION_INSTRUCTION) + prefix_overhead


def mock(entries):
    return MockBackend(ScriptedBehavior.from_dict({"compaction": entries}))


def test_compact_valid_candidate():
    ctx = TrajectoryContext()
    ctx.add(Role.USER, text(4096))
    snap = snapshot(ctx, "big")
    assert snap.active_tokens == 4096
    b = mock([{"content": text(100, "summary"), "latency_s": 12.5}])
    cand = compact(snap, b)
    assert count_tokens(cand.summary) == 100
    assert cand.compaction_latency == 12.5
    assert cand.produced_at == 12.5
    assert cand.source_snapshot_id == "big" and cand.source_tokens == 4096


def test_compact_produced_at_after_offset_submission():
    ctx = ctx_with(text(50))
    b = mock([{"content": "s", "latency_s": 3.7}])
    b.scheduler.submit(2.0)  # unrelated earlier work
    b.scheduler.wait(b.scheduler.submit(2.0))
    cand = compact(snapshot(ctx, "s"), b)
    assert cand.produced_at == pytest.approx(5.7, abs=1e-9)


@pytest.mark.parametrize("summary_tokens", [60, 61, 500])
def test_no_compression_is_failure(summary_tokens):
    ctx = TrajectoryContext()
    ctx.add(Role.USER, text(60))
    with pytest.raises(CompactionFailed):
        compact(snapshot(ctx, "s"), mock([{"content": text(summary_tokens)}]))


@pytest.mark.parametrize("entry", [{"fail": "timeout"}, {"fail": "error"}, {"content": "   "}])
def test_backend_failure_or_empty_is_compaction_failed(entry):
    with pytest.raises(CompactionFailed):
        compact(snapshot(ctx_with(text(50)), "s"), mock([entry]))


# -- fault injection ---------------------------------------------------------

CASE_A = "Tom is partially verified.\nAwaiting verification: Declan and Brian"
CASE_B = "Remove the function call from utils/io.py only."
CASE_C = "The 18-inch performer is Tom Thumb. Search for publications."


def cand(summary):
    return CompactionCandidate(summary, "s", 0.0, 1.0, 10_000)


def test_omission_case_a():
    spec = CorruptionSpec("omission", "Tom is partially verified.\n")
    out = corrupt(cand(CASE_A), spec)
    assert out.summary == "Awaiting verification: Declan and Brian"
    assert out.corruptions == ("omission",)


def test_commission_case_b():
    spec = CorruptionSpec("commission", "call from utils/io.py only", "from everywhere")
    assert corrupt(cand(CASE_B), spec).summary == "Remove the function from everywhere."


def test_entity_replacement_case_c():
    spec = CorruptionSpec("entity_replacement", "Tom Thumb", "Jeffrey Hudson")
    s = "Confirmed: Tom Thumb. Tom Thumb is 18 inches."
    assert corrupt(cand(s), spec).summary == "Confirmed: Jeffrey Hudson. Jeffrey Hudson is 18 inches."
    assert corrupt(cand(CASE_C), spec).summary == "The 18-inch performer is Jeffrey Hudson. Search for publications."


def test_injection_errors():
    with pytest.raises(InjectionError):
        corrupt(cand("abc"), CorruptionSpec("omission", "zzz"))
    with pytest.raises(InjectionError):
        CorruptionSpec("commission", "abc")
    with pytest.raises(InjectionError):
        CorruptionSpec("omission", "")
    with pytest.raises(ValueError):
        CorruptionSpec("hallucination", "abc")


@given(st.text(max_size=60), st.text(min_size=1, max_size=20), st.text(max_size=60), st.text(min_size=1, max_size=20))
def test_corruption_is_local(prefix, target, suffix, replacement):
    # first occurrence edits touch only the targeted span
    summary = prefix + target + suffix
    i = summary.index(target)
    om = corrupt_text(summary, CorruptionSpec("omission", target))
    assert om == summary[:i] + summary[i + len(target):]
    cm = corrupt_text(summary, CorruptionSpec("commission", target, replacement))
    assert cm == summary[:i] + replacement + summary[i + len(target):]


@given(st.lists(st.sampled_from(["Tom", "x", " ", "Thumb"]), max_size=30), st.sampled_from(["Ann", "Bob"]))
def test_entity_replacement_changes_only_entity_occurrences(parts, new):
    summary = "Tom" + "".join(parts)
    out = corrupt_text(summary, CorruptionSpec("entity_replacement", "Tom", new))
    assert out.split(new) == summary.split("Tom")


def test_every_fault_classifies_to_one_mode():
    specs = [
        CorruptionSpec("omission", "a"),
        CorruptionSpec("commission", "a", "b"),
        CorruptionSpec("entity_replacement", "a", "b"),
    ]
    assert [classify(s) for s in specs] == list(CorruptionMode)


def test_fault_schedule_file(tmp_path):
    p = tmp_path / "faults.json"
    items = [{"mode": "omission", "target": "Tom"}, {"mode": "commission", "target": "a", "replacement": "b", "query": "q1", "compaction": 0}]
    p.write_text(json.dumps(items))
    fs = FaultSchedule.load(p)
    assert len(fs.for_lifecycle("q0", 3)) == 1
    assert len(fs.for_lifecycle("q1", 0)) == 2
    assert FaultSchedule.from_list(fs.to_list()).to_list() == fs.to_list()
    p.write_text(json.dumps({"mode": "omission"}))
    with pytest.raises(InjectionError):
        FaultSchedule.load(p)


def test_schedule_skips_absent_targets():
    fs = FaultSchedule.from_list([{"mode": "omission", "target": "absent"}, {"mode": "omission", "target": "Tom "}])
    out = fs.apply(cand("Tom is here"), "q", 0)
    assert out.summary == "is here" and out.corruptions == ("omission",)
