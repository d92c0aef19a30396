"""Exception hierarchy shared by every module in the package."""


class RfDreamError(Exception):
    """Base class for all errors raised by rfdream."""


class ParameterError(RfDreamError, ValueError):
    """An argument is out of its allowed range."""


class ShapeError(RfDreamError, ValueError):
    """Tensor shapes are inconsistent with each other or with a model."""


class NonFiniteError(RfDreamError, ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""


class FormatError(RfDreamError):
    """A file on disk does not follow the expected binary or text layout."""


class NotApplicableError(RfDreamError):
    """A check was requested in a regime where it has no meaning."""


class StalledError(RfDreamError):
    """Gradient ascent could not start because the input gradient is zero.

    The partially built outcome is kept on ``outcome`` so callers can still
    inspect the (unchanged) image and the recorded objective.
    """

    def __init__(self, message, outcome=None):
        super().__init__(message)
        self.outcome = outcome
