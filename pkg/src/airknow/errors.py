"""Exception hierarchy shared by all airknow modules."""


class AirknowError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AirknowError):
    """Array dimensions do not match what an operation requires."""


class DomainError(AirknowError):
    """Numerically invalid input: non-finite values, zero norms, and the like."""


class InputError(AirknowError):
    """An argument violates an operation's contract (empty batch, bad label...)."""


class ConfigError(AirknowError):
    """A configuration value is invalid or inconsistent."""


class ParseError(AirknowError):
    """A file or response could not be parsed; message names the location."""
