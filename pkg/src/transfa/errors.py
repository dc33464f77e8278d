"""Exception types shared across the package."""


class TransFAError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TransFAError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(TransFAError, ValueError):
    """An operand lies outside the domain of the operation (log of 0, ...)."""


class ContractError(TransFAError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(TransFAError, ValueError):
    """Invalid configuration; the message names the offending key."""


class ParseError(TransFAError, ValueError):
    """Malformed annotation / identity / prediction file."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ProtocolError(TransFAError, ValueError):
    """An evaluation protocol cannot be carried out on the given data."""


class CheckpointError(TransFAError, ValueError):
    """Checkpoint file is corrupt, of another version, or mismatches the model."""


class TrainingError(TransFAError, RuntimeError):
    """Training diverged (non-finite loss)."""
