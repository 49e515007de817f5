"""Error hierarchy for the retrieval-generation-reflection pipeline."""

from typing import Optional


class RepoGenError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(RepoGenError):
    """Invalid or incomplete configuration (bad value, missing API key env var)."""


class IngestError(RepoGenError):
    """Repository root missing or unreadable."""


class BackendUnavailable(RepoGenError):
    """
    Backend could not produce a response after all retries.

    Args:
        message: Human readable reason
        task_id: Task the failed request belonged to, if known
        attempts: Number of attempts made before giving up
    """

    def __init__(self, message: str, task_id: Optional[str] = None, attempts: int = 0):
        super().__init__(message)
        self.task_id = task_id
        self.attempts = attempts

    def __str__(self) -> str:
        base = super().__str__()
        if self.task_id:
            return f"[task {self.task_id}] {base}"
        return base


class ScriptExhausted(RepoGenError):
    """Scripted backend has no canned response left for a request."""


class ContractViolation(RepoGenError):
    """A caller broke an API precondition (e.g. out-of-order iteration record)."""


class NotRun(RepoGenError):
    """Asked for a result of a task that has no iteration records."""


class BuildError(RepoGenError):
    """Benchmark could not be built (not enough eligible lines)."""

    def __init__(self, message: str, eligible: int = 0):
        super().__init__(message)
        self.eligible = eligible
