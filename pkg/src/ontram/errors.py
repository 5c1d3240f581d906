"""Exception hierarchy. The CLI maps these onto exit codes."""


class OntramError(Exception):
    """Base class for all package errors."""


class DomainError(OntramError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ShapeError(OntramError, ValueError):
    """Array dimensions disagree with the model or schema."""


class ConfigError(OntramError, ValueError):
    """Invalid configuration or schema."""


class DataError(OntramError, ValueError):
    """Base for problems with the data itself."""


class IngestionError(DataError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class ImputationError(DataError):
    pass


class FitError(DataError):
    pass


class InitError(DataError):
    pass


class SplitError(DataError):
    pass


class AlignmentError(DataError):
    """Saved parameters do not line up with the supplied features."""


class UndefinedStatisticError(DataError):
    """A statistic has no value on the given sample (e.g. a single class)."""


class OptimizationError(OntramError, ArithmeticError):
    """Non-finite values encountered while optimizing."""
