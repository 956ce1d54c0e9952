"""Exception types shared across the package."""


class DataError(Exception):
    """A dataset file is missing, malformed, or internally inconsistent."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value; message names the first bad tensor."""
