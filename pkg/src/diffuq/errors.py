"""Exception types shared across the package.

Each class carries a short ``category`` string that the command line
prints on failure, so scripts can branch on the kind of error.
"""


class DiffuqError(Exception):
    category = "error"


class ShapeError(DiffuqError, ValueError):
    category = "shape"


class ParameterError(DiffuqError, ValueError):
    category = "parameter"


class StateError(DiffuqError, RuntimeError):
    category = "state"


class NumericError(DiffuqError, ArithmeticError):
    category = "numeric"


class TrainingDivergenceError(NumericError):
    category = "divergence"


class DataError(DiffuqError, ValueError):
    category = "data"


class CheckpointError(DiffuqError, OSError):
    category = "io"
