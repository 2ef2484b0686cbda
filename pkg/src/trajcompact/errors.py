"""Exception hierarchy shared across the runtime."""

from __future__ import annotations


class TrajCompactError(Exception):
    """Base class for all errors raised by this package."""


class PreconditionError(TrajCompactError, ValueError):
    """An operation was called with inputs violating its precondition."""


class SequencingError(TrajCompactError):
    """A step was appended out of order."""


class BackendError(TrajCompactError):
    """Generation failed inside a backend."""


class TransportError(BackendError):
    """Upstream transport or 5xx failure. Callers may retry."""

    retryable = True


class UpstreamRejected(BackendError):
    """Upstream returned a 4xx. Not retried."""


class BackendTimeout(BackendError):
    """A generation timed out (real or injected)."""


class ScriptExhausted(BackendError):
    """The mock backend ran out of scripted entries: a test-configuration error."""


class CompactionFailed(TrajCompactError):
    """The compactor returned nothing usable (backend error or no compression)."""


class UpdateFailed(TrajCompactError):
    """A targeted update could not produce a valid repaired candidate."""


class InjectionError(TrajCompactError):
    """A corruption spec could not be applied to a candidate."""


class VerdictParseError(TrajCompactError):
    """Judge output was not a well-formed verdict."""


class LifecycleInvariantError(TrajCompactError):
    """The orchestrator detected a violated lifecycle invariant."""


class TraceParseError(TrajCompactError):
    """A trace file line could not be parsed."""


class UndefinedRateError(TrajCompactError):
    """A rate was requested over zero observations."""


class LabelingError(TrajCompactError):
    """Deviation labels were missing or malformed."""


class ConfigError(TrajCompactError):
    """Configuration failed validation; ``diagnostics`` lists every problem."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics
