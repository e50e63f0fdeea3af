"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class UndefinedBurstinessError(DomainError):
    """Burstiness requested for a user whose expected arrival rate is zero."""


class TrainingDivergedError(RuntimeError):
    pass


class ThresholdError(DomainError):
    """Quantile cuts collapse because a feature is degenerate."""


class PartitionError(DomainError):
    pass


class LocalDivergenceError(RuntimeError):
    def __init__(self, user_id, message="non-finite local loss"):
        super().__init__(f"client {user_id}: {message}")
        self.user_id = user_id


class ComparisonError(ValueError):
    pass


class ConfigError(ValueError):
    """A scenario config key is missing, unknown or out of range."""

    def __init__(self, key, constraint):
        super().__init__(f"{key}: {constraint}")
        self.key = key
        self.constraint = constraint
