"""Exception hierarchy shared by every module."""


class PanoptrackError(Exception):
    """Base class for all errors raised by panoptrack."""


class MalformedInputError(PanoptrackError, ValueError):
    """Input data violates a documented format or type invariant.

    ``location`` names the offending file, frame or field when known.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class DimensionMismatchError(MalformedInputError):
    pass


class InvariantViolation(PanoptrackError, AssertionError):
    """An internal consistency check failed (a bug, not bad input)."""
