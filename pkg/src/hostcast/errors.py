"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: input/config problems
exit with 2, numerical failures during training exit with 3.
"""


class HostcastError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HostcastError, ValueError):
    """Operands have incompatible shapes for the requested operation."""


class InputError(HostcastError, ValueError):
    """Malformed or inconsistent user-supplied data (files, configs, flags)."""


class UsageError(HostcastError, RuntimeError):
    """An API was called in an unsupported way (e.g. backward twice on a tape)."""


class NumericalError(HostcastError, RuntimeError):
    """A non-finite value appeared where the computation requires finite ones."""
