"""Exception hierarchy.

Every exception carries an ``exit_code`` so the command-line front end can
map failures onto its documented status codes without a lookup table.
"""


class NpclustError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(NpclustError):
    """Malformed or unusable input data."""

    exit_code = 2


class ParseError(InputError):
    """A delimited file could not be parsed."""

    def __init__(self, message, row=None, column=None):
        where = ""
        if row is not None:
            where = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.row = row
        self.column = column


class LayoutError(InputError):
    """Condition/replicate layout does not match the matrix."""


class MissingLengthError(InputError, KeyError):
    """A gene has no entry in the gene-length table."""

    def __str__(self):
        return Exception.__str__(self)


class PreconditionError(InputError):
    """Data violates a precondition of the requested operation."""


class DegenerateDataError(InputError):
    """Data carries no usable variation (constant, all-zero, empty sample)."""


class AlignmentError(InputError):
    """Two labelings do not cover the same set of identifiers."""

    def __init__(self, message, missing_in_a=(), missing_in_b=()):
        super().__init__(message)
        self.missing_in_a = list(missing_in_a)
        self.missing_in_b = list(missing_in_b)


class NumericError(NpclustError):
    """Numerical failure during fitting."""

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class EmptyComponentError(NumericError):
    """A mixture component lost all of its posterior weight."""

    def __init__(self, component, iteration=None, trace=None):
        msg = f"component {component} has no posterior weight"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg, trace=trace)
        self.component = component
        self.iteration = iteration


class SingularityError(NumericError):
    """A Gaussian component variance collapsed onto the variance floor."""


class InitializationError(NumericError):
    """No usable starting point could be found."""


class SelectionError(NumericError):
    """Model selection failed for every candidate cluster count."""


class ConfigError(NpclustError):
    """Invalid run configuration."""

    exit_code = 4


class OrderingError(ConfigError):
    """Pipeline steps requested in a non-canonical order."""
