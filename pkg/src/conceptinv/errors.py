"""Exception types shared across the package.

Each carries the CLI exit code it maps to so the command layer can translate
failures without a lookup table.
"""

from __future__ import annotations


class ConceptInvError(Exception):
    exit_code = 1


class ConfigError(ConceptInvError):
    exit_code = 2


class NumericalError(ConceptInvError):
    """Non-finite value or divergence inside a numeric routine."""

    exit_code = 3

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            detail = ", ".join(f"{k}={v!r}" for k, v in diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class BudgetExhausted(ConceptInvError):
    exit_code = 4

    def __init__(self, message: str, attempts: int = 0, accepted: int = 0):
        self.attempts = attempts
        self.accepted = accepted
        rate = accepted / attempts if attempts else 0.0
        super().__init__(f"{message} (attempts={attempts}, accepted={accepted}, rate={rate:.2e})")


class ArtifactError(ConceptInvError):
    """Missing, corrupt or version-mismatched checkpoint / dataset."""

    exit_code = 5


class ShapeError(ConceptInvError, ValueError):
    exit_code = 3
