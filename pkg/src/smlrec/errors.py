class ContractError(ValueError):
    """A caller broke an operation's precondition (shape, range, ordering)."""


class ConfigError(ValueError):
    """Invalid or conflicting configuration."""


class DataError(ValueError):
    """Malformed or unusable interaction data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
