"""Exception hierarchy shared by all adcount modules."""

from __future__ import annotations


class AdCountError(Exception):
    """Base class for every error raised by this package."""


# -- sketch ------------------------------------------------------------------


class InvalidParameterError(AdCountError, ValueError):
    pass


class IncompatibleSketchError(AdCountError):
    """Two sketches (or a sketch and a report) differ in params or hash seeds."""


class MalformedHeaderError(AdCountError, ValueError):
    pass


class TruncatedPayloadError(AdCountError, ValueError):
    pass


# -- blinding ----------------------------------------------------------------


class InvalidElementError(AdCountError, ValueError):
    """A byte string is not a valid (non-identity) element of the group."""


class IndexNotInRosterError(AdCountError, LookupError):
    pass


class LengthMismatchError(AdCountError, ValueError):
    pass


class ShapeMismatchError(AdCountError, ValueError):
    pass


class IncompleteRosterError(AdCountError):
    """Reports do not cover the expected roster; blindings will not cancel.

    ``missing`` lists the roster indices without a report, ``unexpected`` the
    indices that reported but were not expected.
    """

    def __init__(self, missing=(), unexpected=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append(f"missing reports from {self.missing}")
        if self.unexpected:
            parts.append(f"unexpected reports from {self.unexpected}")
        super().__init__("; ".join(parts) or "incomplete roster")


# -- oprf --------------------------------------------------------------------


class OutOfRangeError(AdCountError, ValueError):
    pass


class InconsistencyError(AdCountError):
    """The evaluated value does not verify against the client's hashed input."""


class TransportError(AdCountError):
    """Transport failure. Safe to retry: no client state was modified."""

    retryable = True


# -- client ------------------------------------------------------------------


class StaleObservationError(AdCountError, ValueError):
    pass


class ReplayParseError(AdCountError, ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


# -- aggregator --------------------------------------------------------------


class RoundError(AdCountError):
    """Operation not allowed in the round's current phase."""


class WrongRoundError(RoundError):
    pass


class UnknownSenderError(RoundError):
    pass


class DuplicateReportError(RoundError):
    pass


class EmptyDistributionError(AdCountError, ValueError):
    pass


# -- harness / simulator / cli ----------------------------------------------


class ConfigError(AdCountError, ValueError):
    pass


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")
