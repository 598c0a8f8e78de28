"""Exception types shared across the package.

The CLI maps these to process exit codes: InputError -> 2,
ConvergenceError and NumericalError -> 3, PositivityError -> 4.
"""


class NetspillError(Exception):
    """Base class for package errors."""


class InputError(NetspillError):
    """Malformed input data, schema violation, or invalid configuration."""


class EmptyNetworkError(InputError):
    """Operation requires at least one node (or one non-isolated node)."""


class GenerationError(NetspillError):
    """Random-graph generation exhausted its retry budget."""


class ConvergenceError(NetspillError):
    """Iterative fit failed to converge; carries the last iterate when useful."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class PositivityError(NetspillError):
    """An observation weight denominator underflowed to effectively zero."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class NumericalError(NetspillError):
    """Ill-conditioned linear algebra; results would not be trustworthy."""
