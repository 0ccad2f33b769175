"""Exception hierarchy.

Everything raised on bad user input derives from :class:`CountkitError`, which
the command line maps to exit status 1.
"""


class CountkitError(Exception):
    """Base class for all user-facing errors."""


class SignalTooShort(CountkitError):
    pass


class ParseError(CountkitError):
    pass


class AllSilent(CountkitError):
    pass


class CorpusExhausted(CountkitError):
    pass


class EmptyTrackList(CountkitError):
    pass


class LengthMismatch(CountkitError):
    pass


class DegenerateInput(CountkitError):
    pass


class FeatureKindMismatch(CountkitError):
    pass


class TooShort(CountkitError):
    pass


class ShapeMismatch(CountkitError):
    pass


class LabelOutOfRange(CountkitError):
    pass


class NonFiniteGradient(CountkitError):
    """Raised when a gradient contains NaN or Inf; carries diagnostics."""

    def __init__(self, message, bad_groups=None):
        super().__init__(message)
        self.bad_groups = list(bad_groups or [])


class NonPositiveLambda(CountkitError):
    pass


class EmptyInput(CountkitError):
    pass
