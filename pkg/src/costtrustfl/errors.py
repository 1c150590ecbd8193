class ContractError(ValueError):
    """A caller broke a documented precondition."""


class ConfigurationError(ValueError):
    """The experiment configuration cannot be satisfied."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line


class InvariantError(RuntimeError):
    """A runtime invariant of the simulation was violated."""
