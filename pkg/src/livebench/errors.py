"""Exception hierarchy shared by all benchmark modules."""


class BenchError(Exception):
    """Base class for benchmark errors."""


class AlreadyInitialized(BenchError):
    pass


class DuplicateComponent(BenchError):
    pass


class NotFound(BenchError):
    pass


class SchemaViolation(BenchError):
    """A CSV or JSON file does not match its schema.

    Carries the offending file, 1-based data row number and column name when
    they are known, so callers can print a precise location.
    """

    def __init__(self, message, path=None, row=None, column=None):
        self.detail = message
        self.path = None if path is None else str(path)
        self.row = row
        self.column = column
        where = []
        if self.path is not None:
            where.append(f"file {self.path}")
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class RejectionOverflow(BenchError):
    pass


class NonConvergence(BenchError):
    """An estimator could not produce an estimate; ``note`` is recorded."""

    def __init__(self, note):
        self.note = note
        super().__init__(note)


class InsufficientStudies(NonConvergence):
    pass


class AggregationError(BenchError):
    pass
