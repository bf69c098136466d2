"""Exception types and warning categories shared across the package."""


class EigmetaError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(EigmetaError):
    """Invalid, inconsistent, or unknown run-configuration values."""


# --- data layer ---------------------------------------------------------


class DataError(EigmetaError):
    """Base class for dataset and episode-sampling failures."""


class ParseError(DataError):
    """A CSV cell or row could not be interpreted."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NonBinaryLabel(DataError):
    """A label cell held something other than 0 or 1."""


class InsufficientInstances(DataError):
    """A task is too small to carve out the requested episode."""


class NoNormalInstances(DataError):
    """Center fixing found no normal instances to average."""


class DegenerateColumn(UserWarning):
    """Warning category: a zero-variance column was dropped under normalization."""


# --- numerical kernels --------------------------------------------------


class NumericalError(EigmetaError):
    """Base class for linear-algebra failures."""


class NotPositiveDefinite(NumericalError):
    """Cholesky hit a non-positive pivot; the input is not (numerically) SPD."""


class SingularTriangular(NumericalError):
    """A triangular solve met a (near-)zero diagonal entry."""


class NoConvergence(NumericalError):
    """The Jacobi eigensolver exhausted its sweep budget."""


# --- autodiff / model ---------------------------------------------------


class NonScalarLoss(EigmetaError):
    """backward() was called on a node that is not a scalar."""


class ShapeMismatch(EigmetaError):
    """Arrays with incompatible shapes were combined."""


class DimensionMismatch(ShapeMismatch):
    """Model inputs disagree with the configured dimensions."""


class EmptySupport(EigmetaError):
    """A support set with no instances cannot be encoded."""


class NoAnomalies(EigmetaError):
    """The anomalous scatter matrix needs at least one anomalous instance."""


class NotSingleAnomaly(EigmetaError):
    """The closed-form adaptation requires exactly one anomalous instance."""


class DegenerateAnomaly(EigmetaError):
    """An embedding degeneracy left the episode without a usable adaptation
    (anomalous embedding at the center, or a fully collapsed support)."""


class EmptyClass(EigmetaError):
    """AUC needs at least one score on each side."""


class CheckpointError(EigmetaError):
    """A checkpoint file is malformed or from an incompatible version."""
