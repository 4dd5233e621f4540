"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3.
Everything else is an ordinary crash.
"""


class ListExpandError(Exception):
    """Base class for all package errors."""


class ConfigError(ListExpandError):
    """Invalid configuration (bad flag values, unknown ranker kind, ...)."""


class DataError(ListExpandError):
    """Invalid input data (parse errors, unresolved ids, size violations)."""


class InvalidEntityError(DataError):
    """Entity failed its own invariants (empty surface, empty tokens)."""


class DuplicateEntityError(DataError):
    """Two vocabulary entries tokenize to the same sequence."""


class InsufficientCandidatesError(DataError):
    """Fewer candidates than one sample list needs."""


class PlanRepairError(ListExpandError):
    """Within-list duplicate repair failed after all retry attempts."""


class DecodeError(ListExpandError):
    """Scorer failure during decoding; carries the offending prefix."""

    def __init__(self, message: str, prefix: tuple[str, ...] = ()):
        super().__init__(message)
        self.prefix = prefix


class OracleRefusedError(ListExpandError):
    """Exhaustive scoring refused because the vocabulary exceeds the cap."""


class ResponseParseError(ListExpandError):
    """No expected entity could be recognized in a ranker response."""


class TransportFailure(ListExpandError):
    """Remote chat endpoint unreachable after all retry attempts."""


class IntegrityError(ListExpandError):
    """Cross-stage mismatch (ranked entity outside the plan, orphan result)."""


class StageError(ListExpandError):
    """A pipeline stage aborted; names the stage and the last checkpoint."""

    def __init__(self, stage: str, message: str, checkpoint: str | None = None):
        detail = f"stage '{stage}' failed: {message}"
        if checkpoint:
            detail += f" (last completed checkpoint: {checkpoint})"
        super().__init__(detail)
        self.stage = stage
        self.checkpoint = checkpoint
