"""Exception hierarchy.

Three families map onto the CLI exit codes: argument problems (2), bad input
data (3) and numerical solver failures (4).
"""


class MorphError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ArgumentError(MorphError, ValueError):
    exit_code = 2


class DataError(MorphError, ValueError):
    exit_code = 3


class ObjParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshStructureError(DataError):
    pass


class DegenerateGeometryError(DataError):
    pass


class SolverError(MorphError, RuntimeError):
    exit_code = 4


class ConditioningError(SolverError):
    pass


class ProjectionError(SolverError):
    pass


class AlignmentError(SolverError):
    pass
