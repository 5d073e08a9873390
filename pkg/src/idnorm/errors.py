"""Exception hierarchy shared across the package."""


class IdnormError(Exception):
    """Base class for all package errors."""


class DimensionError(IdnormError, ValueError):
    pass


class NumericDomainError(IdnormError, ArithmeticError):
    pass


class ProbabilityDomainError(IdnormError, ValueError):
    pass


class ConfigurationError(IdnormError, ValueError):
    pass


class EmptyInputError(IdnormError, ValueError):
    pass


class DegenerateInputError(IdnormError, ValueError):
    """Raised when a statistic is undefined for the given input (zero mean, zero variance)."""


class EvaluationError(IdnormError, RuntimeError):
    pass


class NonFiniteLossError(EvaluationError):
    def __init__(self, term, step=None, value=float("nan")):
        self.term = term
        self.step = step
        self.value = value
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r}{where}: {value!r}")


class TargetRangeError(IdnormError, ValueError):
    pass


class IncompatibleRunsError(IdnormError, ValueError):
    pass


class StageError(IdnormError, RuntimeError):
    """Wraps a failure inside an experiment stage, tagging which stage failed."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
