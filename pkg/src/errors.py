"""Exception hierarchy shared by the solvers, charts and the CLI."""


class ShilnikovError(Exception):
    """Base class for every failure raised by this package."""


class ConfigError(ShilnikovError):
    """Malformed or inconsistent experiment configuration."""


class SpecError(ShilnikovError):
    """Invalid system specification or unsupported option."""


class DomainError(ShilnikovError):
    """A state hits a singularity of the Hamiltonian."""


class SolverError(ShilnikovError):
    """Numerical failure of an integrator, Newton or fixed-point solve."""


class StepFailure(SolverError):
    pass


class NoCrossing(SolverError):
    pass


class Tangency(SolverError):
    pass


class NoConvergence(SolverError):
    pass


class ChartExit(SolverError):
    pass


class ChartOverflow(SolverError):
    pass


class ConeViolation(SolverError):
    pass


class ContractionFailure(SolverError):
    def __init__(self, message: str, lipschitz: float = float("nan")):
        super().__init__(f"{message} (measured Lipschitz estimate {lipschitz:.3g})")
        self.lipschitz = lipschitz


class InnerNewtonFailure(SolverError):
    pass


class NewtonFailure(SolverError):
    def __init__(self, message: str, largest_mu: float | None = None):
        if largest_mu is not None:
            message = f"{message} (largest successful mu {largest_mu:.3g})"
        super().__init__(message)
        self.largest_mu = largest_mu


class TransversalityFailure(SolverError):
    def __init__(self, message: str, determinant: float = 0.0):
        super().__init__(f"{message} (determinant {determinant:.3g})")
        self.determinant = determinant


class DegenerateCriticalPoint(SolverError):
    pass


class DegenerateOrbit(SolverError):
    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition number {condition:.3g})")
        self.condition = condition


class IllConditioned(SolverError):
    pass


class ResonanceObstruction(SolverError):
    pass


class NotEqualEigenvalues(SolverError):
    pass


class NotHyperbolic(SolverError):
    pass


class TailTruncationWarning(UserWarning):
    pass


class TangencyWarning(UserWarning):
    pass
