"""Exception hierarchy shared by all modules.

Every error carries a module-qualified ``code`` so the command line front end
can map failures onto exit codes without string matching.
"""


class DHLabError(Exception):
    code = "dh_lyapunov.error"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details


class ValidationError(DHLabError, ValueError):
    code = "dist_models.validation"


class RegimeViolation(DHLabError, ValueError):
    code = "alpha_delta.regime_violation"


class InvalidParameter(DHLabError, ValueError):
    code = "invalid_parameter"


class OutOfRange(DHLabError, ValueError):
    code = "out_of_range"


class BoundaryRoot(DHLabError, ArithmeticError):
    code = "alpha_delta.boundary_root"


class ScanInconclusive(DHLabError, ArithmeticError):
    code = "alpha_delta.scan_inconclusive"


class NoConvergence(DHLabError, ArithmeticError):
    """Fixed-point iteration ran out of iterations; ``residual`` holds the last value."""

    code = "transfer_grid.no_convergence"

    def __init__(self, message="", residual=float("nan"), iterations=0, **details):
        super().__init__(message, **details)
        self.residual = residual
        self.iterations = iterations


class Divergent(DHLabError, ArithmeticError):
    code = "transfer_grid.divergent"


class FitRejected(DHLabError, ArithmeticError):
    code = "dh_asymptotics.fit_rejected"


class DegenerateRemainder(DHLabError, ArithmeticError):
    code = "dh_asymptotics.degenerate_remainder"


class DomainTooNarrow(DHLabError, ValueError):
    code = "dh_asymptotics.domain_too_narrow"
