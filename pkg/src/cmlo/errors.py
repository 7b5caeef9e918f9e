"""Exception types shared across the package."""


class CmloError(Exception):
    """Base class for all package-specific errors."""


class MissingSamples(CmloError):
    """A state-action pair has zero generative samples; names the pair."""

    def __init__(self, state: int, action: int):
        self.state = state
        self.action = action
        super().__init__(f"no samples for state-action pair ({state}, {action})")


class ConvergenceFailure(CmloError):
    """An iterative solver exhausted its iteration cap."""


class InvalidLipschitz(CmloError):
    """Lipschitz constant below the admissible floor R/(1-gamma)."""


class InfeasibleInterval(CmloError):
    """Derived epsilon <= 0: the current model bias is already consumed by
    the shift/optimality budget, so no finite sample interval exists."""


class NumericalFailure(CmloError):
    """Non-finite values encountered in a numerical computation."""


class EmptySlice(CmloError):
    """An operation requiring data received an empty tuple set."""


class DegenerateCloud(CmloError):
    """All points coincide; PCA directions are undefined."""


class DegenerateBase(CmloError):
    """Base hull volume is zero; the coverage ratio is undefined."""


class PlannerFailure(CmloError):
    """A trajectory planner diverged or produced no finite candidate."""


class InvalidCost(CmloError):
    """Control cost matrix is not positive definite."""


class SchemaError(CmloError):
    """Experiment config failed schema validation."""
