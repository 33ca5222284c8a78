"""Exception hierarchy. Each family maps to a CLI exit code."""


class PathDidError(Exception):
    exit_code = 1
    module = "pathdid"


class ConfigError(PathDidError):
    exit_code = 2
    module = "cli"


class DataError(PathDidError):
    exit_code = 3
    module = "panel_data"


class ParseError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class EmptyCellError(DataError):
    """A subsample required by an estimator has no observations."""

    module = "estimators"

    def __init__(self, message, cell=None):
        self.cell = cell
        super().__init__(message)


class NumericalError(PathDidError):
    exit_code = 4
    module = "first_stage"


class NonConvergenceError(NumericalError):
    def __init__(self, message, trace=None):
        self.trace = trace or []
        super().__init__(message)


class SeparationError(NonConvergenceError):
    pass


class DegenerateOutcomeError(NumericalError):
    pass


class SingularityError(NumericalError):
    def __init__(self, message, columns=None):
        self.columns = list(columns or [])
        super().__init__(message)
