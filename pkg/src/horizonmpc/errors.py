"""Exception hierarchy shared by all modules."""


class HorizonMPCError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(HorizonMPCError, ValueError):
    """Inputs violate a documented precondition (shapes, ranges, grids)."""


class IntegrationDiverged(HorizonMPCError):
    """A non-finite state was produced while integrating."""

    def __init__(self, time: float, message: str | None = None):
        self.time = float(time)
        super().__init__(message or f"integration diverged at t={self.time:.6g}")


class SolveFailed(HorizonMPCError):
    """Every start of an optimal control solve diverged."""


class ExcludedState(HorizonMPCError, ValueError):
    """The equilibrium (zero stage minimum) was passed where it is excluded."""


class EmptyLevelSet(HorizonMPCError):
    """No grid point satisfies the level-set threshold."""


class CoverageExceeded(HorizonMPCError, ValueError):
    """A growth-bound lookup went beyond the tabulated interval."""

    def __init__(self, t: float, required_n_star: int, n_star: int):
        self.t = float(t)
        self.required_n_star = int(required_n_star)
        self.n_star = int(n_star)
        super().__init__(
            f"t={self.t:.6g} exceeds growth-bound coverage (n_star={self.n_star}); "
            f"extend the table to n_star >= {self.required_n_star}"
        )


class DegenerateHorizon(HorizonMPCError, ValueError):
    """One of the integrals in the suboptimality formula vanished."""


class AtEquilibrium(HorizonMPCError):
    """A stage-cost denominator is zero, i.e. the state has converged."""


class CertificationFailed(HorizonMPCError):
    """No partition point certified the step and the exit strategy is abort."""

    def __init__(self, time: float, tested: list[tuple[float, float]]):
        self.time = float(time)
        self.tested = list(tested)
        super().__init__(
            f"no control horizon certified at t={self.time:.6g}; tested (tau, alpha): {self.tested}"
        )


class BoundNotApplicable(HorizonMPCError):
    """The performance bound requires a converged closed loop."""
