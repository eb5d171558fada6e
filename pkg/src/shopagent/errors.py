from __future__ import annotations


class ContractViolation(Exception):
    """A caller broke an operation's precondition."""


class IllegalActionError(ContractViolation):
    """The action is not in the current observation's action set."""


class TrainingAborted(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, *, phase: str | None = None, minibatch: int | None = None):
        super().__init__(message)
        self.phase = phase
        self.minibatch = minibatch


class CollectionAborted(RuntimeError):
    """Rollout collection could not be completed by the worker pool."""
