"""Exception hierarchy shared by the library and the command-line harness."""


class RefineCTRError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(RefineCTRError, ValueError):
    """Bad schema, role map, checkpoint mismatch or run configuration."""

    exit_code = 2


class DataError(RefineCTRError, ValueError):
    """A data file or row could not be understood."""

    exit_code = 3


class ParseError(DataError):
    """A single malformed input line. ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class NumericError(RefineCTRError, ArithmeticError):
    """Non-finite value or a zero vector where a direction was required."""

    exit_code = 4


class ContractError(RefineCTRError, RuntimeError):
    """A caller broke an operation's precondition (stale cache, bad step index)."""

    exit_code = 1
