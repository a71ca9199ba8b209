"""Exception types shared across the package.

Each class maps to one CLI exit code (see ``cueseg.cli``).
"""


class CuesegError(Exception):
    exit_code = 1


class ShapeError(CuesegError, ValueError):
    """Tensor or array shapes are inconsistent with an operation's contract."""


class ConfigError(CuesegError, ValueError):
    """A configuration value is invalid (head count, reduction ratio, sizes...)."""


class NumericDomainError(CuesegError, ValueError):
    """Input values fall outside the numeric domain an operation accepts."""

    exit_code = 3


class NumericFailure(CuesegError, RuntimeError):
    """Training produced a non-finite value."""

    exit_code = 3


class TokenizationError(CuesegError, ValueError):
    exit_code = 2


class DataError(CuesegError):
    """Malformed, missing or inconsistent data on disk."""

    exit_code = 2


class ParseError(DataError, ValueError):
    """A grounding record failed validation.

    ``line`` is 1-based; ``field`` is a dotted/indexed path such as
    ``grounding.regions[0].bbox``.
    """

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
