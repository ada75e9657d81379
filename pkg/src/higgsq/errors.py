"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract, so every failure a user can
trigger from the command line has a distinct class here.
"""


class HiggsError(Exception):
    """Base class for all package errors."""


class InvalidArgument(HiggsError, ValueError):
    """A precondition on an argument was violated."""


class CorruptionError(HiggsError):
    """Stored data decodes to something impossible (e.g. code >= n)."""


class FormatError(CorruptionError):
    """Binary container could not be parsed."""

    code = "format"


class BadMagic(FormatError):
    code = "bad-magic"


class BadVersion(FormatError):
    code = "bad-version"


class ChecksumMismatch(FormatError):
    code = "bad-crc"


class Truncated(FormatError):
    code = "truncated"


class InfeasibleBudget(HiggsError):
    """No allocation fits under the requested bit budget."""

    def __init__(self, message: str, min_avg_bits: float):
        super().__init__(message)
        self.min_avg_bits = min_avg_bits


class ConvergenceError(HiggsError):
    """An iterative procedure hit its iteration cap."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []
