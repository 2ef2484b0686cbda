"""Deterministic stand-ins for the judge and repair models.

They plug into :class:`~trajcompact.llm_backend.ScriptQueue` as responders and
decide purely by checking whether the facts the continuation relies on
(``required_spans``) survive in the candidate summary.
"""

from __future__ import annotations

import json
from typing import Sequence

from .llm_backend import GenerationRequest

SUMMARY_HEADER = "CANDIDATE COMPACTED STATE:\n"
_SECTION_BREAK = "\n\n---\n"


def extract_summary(prompt: str) -> str:
    start = prompt.index(SUMMARY_HEADER) + len(SUMMARY_HEADER)
    end = prompt.index(_SECTION_BREAK, start)
    return prompt[start:end]


class OracleJudge:
    def __init__(self, required_spans: Sequence[str]):
        self.required_spans = list(required_spans)

    def missing(self, summary: str) -> list[str]:
        return [s for s in self.required_spans if s not in summary]

    def __call__(self, req: GenerationRequest) -> str:
        missing = self.missing(extract_summary(req.messages[-1]["content"]))
        if missing:
            verdict = {
                "plan_alignment": 3,
                "information_preservation": 2,
                "score": 3,
                "reasoning": "Compacted state is missing facts the trajectory relies on: " + "; ".join(missing),
            }
        else:
            verdict = {
                "plan_alignment": 10,
                "information_preservation": 10,
                "score": 10,
                "reasoning": "Every fact the trajectory relies on is present.",
            }
        return json.dumps(verdict)


class OracleRepairer:
    """Restores missing required spans by appending them to the summary."""

    def __init__(self, required_spans: Sequence[str]):
        self.required_spans = list(required_spans)

    def __call__(self, req: GenerationRequest) -> str:
        summary = extract_summary(req.messages[-1]["content"])
        missing = [s for s in self.required_spans if s not in summary]
        return "\n".join([summary, *missing]) if missing else summary
