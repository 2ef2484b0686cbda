from __future__ import annotations

import hashlib
import json
from decimal import ROUND_HALF_UP, Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajcompact.compactor import CompactionCandidate
from trajcompact.context_store import Role, Step, count_tokens
from trajcompact.errors import PreconditionError, VerdictParseError
from trajcompact.judge import (
    JudgeVerdict,
    SpeculativeWindow,
    build_judge_request,
    decide,
    judge_prompt_template,
    parse_verdict,
    round_half_up_mean,
    serialize_window,
)
from trajcompact.llm_backend import Purpose

# sha256 of the published judge prompt listing, frozen when the asset was extracted
JUDGE_PROMPT_SHA256 = "d19a5268ff38d924232c682df61ca584c059946a854d4db71bca5612f9abc13d"


def half_up(p: int, i: int) -> int:
    return int((Decimal(p) * Decimal("0.5") + Decimal(i) * Decimal("0.5")).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def raw(p, i, score, reasoning="ok"):
    return json.dumps({"plan_alignment": p, "information_preservation": i, "score": score, "reasoning": reasoning})


def window(*contents, sid="s", tool=None, obs=None):
    steps = []
    for c in contents:
        steps.append(Step.build(len(steps), Role.AGENT_REASONING, c))
        if tool:
            steps.append(Step.build(len(steps), Role.TOOL_CALL, tool))
            steps.append(Step.build(len(steps), Role.TOOL_OBSERVATION, obs or "observed"))
    return SpeculativeWindow(tuple(steps), sid)


def cand(summary="SUMMARY", sid="s"):
    return CompactionCandidate(summary, sid, 0.0, 1.0, 10_000)


def test_prompt_asset_is_the_published_listing():
    tpl = judge_prompt_template()
    assert hashlib.sha256(tpl.encode()).hexdigest() == JUDGE_PROMPT_SHA256
    assert tpl.count("{summary_handover}") == 1 and tpl.count("{spec_actions}") == 1


def test_request_fills_both_placeholders():
    req = build_judge_request(cand("the handover"), window("step one", "step two"))
    assert req.purpose is Purpose.JUDGE and len(req.messages) == 1
    body = req.messages[0]["content"]
    assert "{summary_handover}" not in body and "{spec_actions}" not in body
    assert "the handover" in body
    assert "[step 1] reasoning: step one\n[step 2] reasoning: step two" in body
    tpl = judge_prompt_template()
    assert len(body) == len(tpl) - len("{summary_handover}") - len("{spec_actions}") + len("the handover") + len(
        serialize_window(window("step one", "step two").steps)
    )


def test_observations_excluded_unless_enabled():
    w = window("look", tool="search(q)", obs="SECRET-OBS")
    assert "SECRET-OBS" not in build_judge_request(cand(), w).messages[0]["content"]
    body = build_judge_request(cand(), w, include_observations=True).messages[0]["content"]
    assert "[step 1] tool call: search(q)" in body and "SECRET-OBS" in body


def test_window_k_counts_agent_turns():
    w = window("a", "b", tool="t()")
    assert w.k == 2 and len(w.steps) == 6
    assert window("a", "b").k == 2 == len(window("a", "b").steps)


def test_preconditions():
    with pytest.raises(PreconditionError):
        build_judge_request(cand(), SpeculativeWindow((), "s"))
    with pytest.raises(PreconditionError):
        build_judge_request(cand(sid="other"), window("a"))


_word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=3, max_size=8)


@given(st.lists(_word, min_size=1, max_size=10, unique=True), st.data())
def test_evidence_containment(words, data):
    # unique marker tokens: only candidate and window markers may appear
    markers = [f"ZQ{w.upper()}{n}QZ" for n, w in enumerate(words)]
    roles = data.draw(st.lists(st.sampled_from(["pre", "summary", "window"]), min_size=len(markers), max_size=len(markers)))
    summary = " ".join(m for m, r in zip(markers, roles) if r == "summary") or "empty"
    win = [m for m, r in zip(markers, roles) if r == "window"] or ["idle"]
    body = build_judge_request(cand(summary), window(*win)).messages[0]["content"]
    for m, r in zip(markers, roles):
        assert (m in body) == (r != "pre")


def test_judge_input_is_small_fraction_of_source():
    # one representative shape: a long coding context, a compact handover and a 4-turn window
    source_tokens = 24_000
    summary = "x" * 4 * 700
    w = window(*["y" * 4 * 110] * 4, tool="edit(file)")
    judged = count_tokens(summary) + count_tokens(serialize_window(w.steps))
    ratio = judged / source_tokens
    assert judged == 700 + count_tokens(serialize_window(w.steps))
    assert ratio < 0.1


@pytest.mark.parametrize(
    "p,i,score,expected,corrected",
    [(10, 8, 9, 9, False), (0, 0, 0, 0, False), (7, 6, 5, 7, True), (7, 6, 6, 7, True), (7, 6, 7, 7, False)],
)
def test_parse_examples(p, i, score, expected, corrected):
    v = parse_verdict(raw(p, i, score))
    assert v.score == expected and v.formula_corrected is corrected
    assert (v.plan_alignment, v.information_preservation) == (p, i)


def test_formula_exhaustive_against_decimal_oracle():
    for p in range(11):
        for i in range(11):
            assert round_half_up_mean(p, i) == half_up(p, i)
            assert parse_verdict(raw(p, i, half_up(p, i))).score == half_up(p, i)
            assert parse_verdict(raw(p, i, 0 if half_up(p, i) else 10)).score == half_up(p, i)


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        "[1, 2]",
        raw(11, 5, 8),
        raw(-1, 5, 2),
        raw(5, 5, 11),
        raw(5.5, 5, 5),
        raw(True, 5, 5),
        raw("5", 5, 5),
        json.dumps({"plan_alignment": 5, "score": 5, "reasoning": "x"}),
        json.dumps({"plan_alignment": 5, "information_preservation": 5, "score": 5}),
        "```json\n" + raw(5, 5, 5) + "\n```",
    ],
)
def test_parse_failures(text):
    with pytest.raises(VerdictParseError):
        parse_verdict(text)


def test_decide_examples():
    assert decide(JudgeVerdict(7, 7, 7, "r")).accepted
    d = decide(JudgeVerdict(6, 6, 6, "missing Tom"))
    assert not d.accepted and d.diagnosis == "missing Tom" and d.kind == "reject"
    for t in range(11):
        assert decide(JudgeVerdict(10, 10, 10, "r"), t).accepted
    assert decide(JudgeVerdict(3, 3, 3, "  ")).diagnosis


@given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10))
def test_decision_monotone_in_threshold(p, i, t):
    v = parse_verdict(raw(p, i, half_up(p, i)))
    if decide(v, t).accepted:
        assert all(decide(v, lower).accepted for lower in range(t + 1))
    assert decide(v, t).accepted == (v.score >= t)


def test_verdict_round_trip():
    v = JudgeVerdict(7, 6, 7, "r", True)
    assert JudgeVerdict.from_dict(v.to_dict()) == v
