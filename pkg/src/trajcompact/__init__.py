"""Agent loop runtime with synchronous and trajectory-validated asynchronous compaction."""

from .compactor import CompactionCandidate, CorruptionMode, CorruptionSpec, FaultSchedule, compact, corrupt
from .context_store import ContextSnapshot, Role, Step, TrajectoryContext, count_tokens, should_compact, snapshot
from .judge import JudgeVerdict, SpeculativeWindow, build_judge_request, decide, parse_verdict
from .llm_backend import GenerationRequest, GenerationResponse, HttpBackend, MockBackend, Purpose, ScriptedBehavior
from .metrics import CompactionEvent, LatencyBreakdown, Outcome, breakdown, deviation_locality, rejection_rate
from .orchestrator import Mode, Orchestrator, RunConfig, RunResult, targeted_update

__version__ = "0.1.0"

__all__ = [
    "CompactionCandidate",
    "CompactionEvent",
    "ContextSnapshot",
    "CorruptionMode",
    "CorruptionSpec",
    "FaultSchedule",
    "GenerationRequest",
    "GenerationResponse",
    "HttpBackend",
    "JudgeVerdict",
    "LatencyBreakdown",
    "MockBackend",
    "Mode",
    "Orchestrator",
    "Outcome",
    "Purpose",
    "Role",
    "RunConfig",
    "RunResult",
    "ScriptedBehavior",
    "SpeculativeWindow",
    "Step",
    "TrajectoryContext",
    "breakdown",
    "build_judge_request",
    "compact",
    "corrupt",
    "count_tokens",
    "decide",
    "deviation_locality",
    "parse_verdict",
    "rejection_rate",
    "should_compact",
    "snapshot",
    "targeted_update",
]
