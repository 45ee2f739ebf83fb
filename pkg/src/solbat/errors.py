"""Exception hierarchy shared across the package."""


class SolbatError(Exception):
    """Base class for all package errors."""


class BatteryDomainError(SolbatError):
    """A battery quantity left its physically admissible range."""


class InfeasiblePowerError(SolbatError):
    """Demanded battery power exceeds the cell's capability.

    Raised when the current-solve discriminant goes negative, i.e. the
    requested discharge power cannot be delivered at the present state.
    """

    def __init__(self, p_b: float, p_b_min: float, member: int | None = None):
        self.p_b = p_b
        self.p_b_min = p_b_min
        self.member = member
        tag = "" if member is None else f" (ensemble member {member})"
        super().__init__(
            f"demanded battery power {p_b:.6g} kW below feasibility "
            f"boundary {p_b_min:.6g} kW{tag}"
        )


class SingularityError(SolbatError):
    """Side-reaction algebra hit the 1 - 2*gamma*alpha singularity."""


class EndOfLifeError(SolbatError):
    """Capacity loss reached or exceeded the pristine capacity."""


class InsufficientHistoryError(SolbatError):
    """Not enough matching samples to learn forecast-error moments."""


class IngestionError(SolbatError):
    """Time-series input could not be aligned or parsed."""


class ConfigurationError(SolbatError):
    """Inconsistent horizon, limits, or experiment configuration."""


class CommitViolationError(SolbatError):
    """Attempt to alter an already committed dispatch entry."""


class InfeasibleProblemError(SolbatError):
    """The dispatch program has no feasible point.

    Carries the label of the most violated constraint at the least
    infeasible iterate seen by the solver.
    """

    def __init__(self, worst_label: str, worst_violation: float):
        self.worst_label = worst_label
        self.worst_violation = worst_violation
        super().__init__(
            f"no feasible point found; worst constraint {worst_label} "
            f"violated by {worst_violation:.3e}"
        )
