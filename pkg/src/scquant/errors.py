"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible dimensions."""


class NotPositiveDefiniteError(ArithmeticError):
    """A matrix required to be symmetric positive definite is not."""


class SolverStallError(RuntimeError):
    """An iterative solver exceeded its iteration budget."""


class DegenerateActiveSetError(RuntimeError):
    """The reduced optimality system of a converged QP is singular.

    Raised when weakly active constraints make the implicit gradient
    ill-defined and the caller asked for strict behaviour.
    """


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss.

    Attributes:
        stats: diagnostics from the offending batch (step, loss parts,
            parameter and gradient magnitudes).
    """

    def __init__(self, message: str, stats: dict | None = None):
        super().__init__(message)
        self.stats = dict(stats or {})


class DatasetFormatError(ValueError):
    """A dataset file does not match the expected binary layout."""


class CheckpointFormatError(ValueError):
    """A checkpoint file does not match the expected binary layout."""
