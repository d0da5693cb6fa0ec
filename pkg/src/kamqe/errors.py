"""Exception hierarchy shared by all modules."""


class KamqeError(Exception):
    """Base class for every error raised by this package."""


class DomainError(KamqeError, ValueError):
    """An input lies outside the domain where an operation is defined."""


class NoSolutionError(KamqeError):
    """An iterative solver did not converge."""


class DegeneracyError(KamqeError):
    """A Hessian or frequency map is singular where it must not be."""


class PreconditionError(KamqeError, ValueError):
    pass


class SmallDivisorError(KamqeError):
    """A divisor <omega, k> fell below the configured tolerance."""

    def __init__(self, k, value, tol):
        self.k = tuple(int(x) for x in k)
        self.value = float(value)
        self.tol = float(tol)
        super().__init__(f"small divisor |<omega,k>| = {self.value:.3e} < {self.tol:.1e} at k={self.k}")


class SamplingError(KamqeError):
    pass


class StepFailure(KamqeError):
    """The implicit canonical change of a KAM step could not be resolved."""


class AccuracyError(KamqeError):
    """A refit onto the Fourier x polynomial basis missed its tolerance."""


class DiagnosticUnavailable(KamqeError):
    pass


class CertificationFailure(KamqeError):
    """No slow torus could be certified for the model and search region."""
