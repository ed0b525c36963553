"""Exception hierarchy shared by every deskrecon module."""

from __future__ import annotations

from pathlib import Path


class DeskReconError(Exception):
    """Base class for all errors raised by deskrecon."""


class DomainError(DeskReconError, ValueError):
    """A mathematical precondition was violated (non-positive depth, empty input)."""


class EmptyResultError(DomainError):
    """A reduction was requested over zero valid elements."""


class SceneError(DomainError):
    """The synthetic scene or trajectory cannot be generated as configured."""


class ContractViolation(DeskReconError):
    """The caller broke an API contract (mismatched widths, stale tape)."""


class DataFormatError(DeskReconError):
    """A file on disk is missing pieces or malformed."""

    def __init__(self, path: str | Path, reason: str, offset: int | None = None):
        self.path = str(path)
        self.reason = reason
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {reason}")


class TrainingError(DeskReconError):
    """Training hit a non-finite loss."""

    def __init__(self, step: int, component: str, value: float):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
