"""Exception hierarchy shared by all modules."""


class LowBudgetError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(LowBudgetError, ValueError):
    """A precondition on shapes, sizes or arguments was not met."""


class DomainError(LowBudgetError, ValueError):
    """A value is outside the mathematical domain of an operation (log of 0, NaN logits)."""


class DataError(LowBudgetError, ValueError):
    """Input data is malformed, e.g. a NaN score."""


class FormatError(LowBudgetError, ValueError):
    """A file does not follow its declared binary or text format."""


class TrainingDivergence(LowBudgetError, RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InvariantError(LowBudgetError, AssertionError):
    """A runtime self-check failed (e.g. the loss decomposition identity)."""
