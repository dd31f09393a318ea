"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration field is missing or out of range."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class LifecycleError(RuntimeError):
    """An object was used in a state that does not allow the call."""


class UsageError(RuntimeError):
    """An API was misused, e.g. a cache from a different parameter set."""


class DegenerateError(ValueError):
    """The requested quantity is undefined for the given parameters."""


class TrainingDivergence(FloatingPointError):
    """A non-finite value appeared during training.

    ``context`` describes where it happened; ``last_finite`` optionally carries
    the last parameter snapshot that was still finite.
    """

    def __init__(self, message: str, context: str = "", last_finite=None):
        self.context = context
        self.last_finite = last_finite
        super().__init__(f"{message} ({context})" if context else message)
