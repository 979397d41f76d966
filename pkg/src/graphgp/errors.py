"""Exception types shared across the package.

The CLI maps these onto exit codes (input errors -> 1, numerical
failures -> 2), so library code should raise the most specific one.
"""


class GraphGpError(Exception):
    """Base class for all errors raised by this package."""


class InputError(GraphGpError, ValueError):
    """Malformed or out-of-contract input (bad indices, files, shapes)."""


class NumericalError(GraphGpError, RuntimeError):
    """A numerical routine failed after all recovery attempts."""


class UnsupportedOperationError(GraphGpError):
    """Operation not defined for the given configuration."""
