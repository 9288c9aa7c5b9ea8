"""Exception types raised by the solver."""


class SuperDCError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDimensionError(SuperDCError, ValueError):
    pass


class InvalidInputError(SuperDCError, ValueError):
    pass


class UnsupportedBandwidthError(SuperDCError, ValueError):
    pass


class PoleError(SuperDCError, ArithmeticError):
    """A kernel evaluation hit a singularity (source and target coincide)."""


class DensifyCapError(SuperDCError, ValueError):
    pass
