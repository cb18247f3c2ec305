class PreconditionError(ValueError):
    """Raised when inputs violate an operation's documented preconditions."""


class DegenerateScaleWarning(RuntimeWarning):
    """Emitted when a predicted scale is zero and a step CDF is used instead."""
