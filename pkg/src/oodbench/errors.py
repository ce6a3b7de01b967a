"""Exception types shared across the package.

Every error a public operation can raise is one of these, so callers can
distinguish bad arguments from bad files from runs that legitimately failed.
"""


class OodbenchError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(OodbenchError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(OodbenchError):
    """A binary or JSON artifact does not conform to its declared format."""


class ConsistencyError(OodbenchError):
    """Two artifacts that must agree (e.g. images vs. manifest) do not."""


class CapacityError(OodbenchError):
    """A stratum cannot supply the requested number of items."""

    def __init__(self, stratum, requested, available):
        self.stratum = stratum
        self.requested = requested
        self.available = available
        super().__init__(
            f"stratum {stratum!r}: requested {requested} items, only {available} available"
        )


class ShapeError(OodbenchError):
    """Tensor shapes do not match the network specification."""


class CoverageError(OodbenchError):
    """A category/condition cell required by an analysis has no items."""

    def __init__(self, missing_cells):
        self.missing_cells = list(missing_cells)
        super().__init__(f"no items for cells: {self.missing_cells}")


class NumericError(OodbenchError):
    """A numeric quantity became non-finite."""


class StateError(OodbenchError):
    """An operation was called in a state that does not support it."""


class UndefinedCorrelationError(OodbenchError):
    """Correlation requested on data with zero variance."""


class TrainingFailure(OodbenchError):
    """Training collapsed to chance level and exhausted its restart budget.

    Carries the epoch records accumulated across all attempts.
    """

    def __init__(self, message, records):
        self.records = records
        super().__init__(message)


class SearchFailure(OodbenchError):
    """Every grid point failed; carries the partial results table."""

    def __init__(self, message, table):
        self.table = table
        super().__init__(message)


class PlanError(OodbenchError):
    """An experiment plan is internally inconsistent (e.g. missing baseline)."""


class ConfigError(OodbenchError):
    """A run configuration violates the schema.

    ``pointer`` is the JSON pointer of the offending key.
    """

    def __init__(self, pointer, message):
        self.pointer = pointer
        self.message = message
        super().__init__(f"{pointer}: {message}")
