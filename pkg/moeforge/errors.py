"""Exception hierarchy for moeforge."""

from __future__ import annotations


class MoeforgeError(Exception):
    pass


class ConfigurationError(MoeforgeError, ValueError):
    pass


class BackendError(MoeforgeError):
    pass


class RetryableBackendError(BackendError):
    """Transient failure (timeout, 5xx); the caller may retry."""


class ProtocolError(BackendError):
    """The server answered, but not in the shape we asked for. Never retried."""


class StepError(BackendError):
    def __init__(self, expert_ids: list[int], message: str | None = None) -> None:
        self.expert_ids = sorted(expert_ids)
        super().__init__(message or f"Experts failed after retries: {self.expert_ids}")


class MetricError(MoeforgeError):
    def __init__(self, expert_id: int, message: str) -> None:
        self.expert_id = expert_id
        super().__init__(message)


class FixtureError(MoeforgeError):
    def __init__(self, line_number: int, message: str) -> None:
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")
