"""Exception hierarchy shared across the package.

Two broad families matter to callers: ValidationError for bad inputs
(CLI exit code 2) and NumericalError for solver/optimizer failures
(CLI exit code 3).
"""


class Cd4DynError(Exception):
    """Base class for all package errors."""


class ValidationError(Cd4DynError, ValueError):
    """Invalid user input: malformed data, impossible parameters, bad config."""


class NumericalError(Cd4DynError, RuntimeError):
    """A numerical routine failed to produce a trustworthy result."""


class FeedbackSingularityError(NumericalError):
    """Feedback term evaluated at zero total cell count."""


class NoEquilibriumError(NumericalError):
    """The rate constants admit no positive equilibrium."""


class NonConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap before converging."""


class StepSizeUnderflowError(NumericalError):
    """Adaptive integration drove the step size below the resolvable limit."""


class NegativeStateError(NumericalError):
    """Integration left the positive orthant beyond tolerance."""


class QuadratureError(NumericalError):
    """Adaptive quadrature could not be centered (degenerate inner Hessian)."""


class LineSearchError(NumericalError):
    """No ascent step found along the scoring direction."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MaxIterationsError(NonConvergenceError):
    """Optimizer reached its iteration cap; diagnostics attached."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingularMatrixError(NumericalError):
    """Curvature matrix remained singular after the allowed ridge repair."""


class PatientEvaluationError(NumericalError):
    """Likelihood evaluation failed for one patient; id attached."""

    def __init__(self, patient_id, message):
        super().__init__(f"patient {patient_id!r}: {message}")
        self.patient_id = patient_id
