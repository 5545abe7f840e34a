"""Exception hierarchy shared by all modules."""


class MagtrackError(Exception):
    """Base class for library errors."""


class DomainError(MagtrackError, ValueError):
    """Query point outside the valid domain of a field model (singularity, magnet body)."""


class ConfigError(MagtrackError, ValueError):
    """Invalid configuration value."""


class ContractError(MagtrackError, ValueError):
    """Argument shapes or lengths violate an operation's contract."""


class FormatError(MagtrackError, OSError):
    """Malformed or truncated binary file.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = ""
        if path is not None:
            where += f" in {path}"
        if offset is not None:
            where += f" at byte {offset}"
        super().__init__(f"{message}{where}")


class DivergenceError(MagtrackError, ArithmeticError):
    """Training produced a non-finite loss."""
