"""Exception hierarchy shared by all modules."""


class LayerTrackError(Exception):
    """Base class for all package errors."""


class IntegrationError(LayerTrackError):
    """A Runge-Kutta stage or rotation re-projection produced an invalid value."""

    def __init__(self, message: str, stage: int | None = None, step: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class ControllerError(LayerTrackError):
    """The tracking controller hit a singular configuration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DegenerateThrustError(ControllerError):
    pass


class AttitudeConstructionError(ControllerError):
    pass


class OutOfRangeError(LayerTrackError, ValueError):
    """Evaluation time outside the support of a piecewise polynomial."""


class ConditioningError(LayerTrackError):
    """Vandermonde system too ill-conditioned to interpolate reliably."""


class InfeasibleSpecError(LayerTrackError):
    """The constrained polynomial fit has a singular KKT system."""


class SolverFailure(LayerTrackError):
    """iLQR backward pass could not be regularized to positive definiteness."""


class DatasetFormatError(LayerTrackError, ValueError):
    """Malformed or version-mismatched dataset / checkpoint file."""


class TrainingDivergence(LayerTrackError):
    """Loss became non-finite or exceeded the divergence threshold."""


class PlanningError(LayerTrackError):
    """The planner objective became non-finite."""

    def __init__(self, message: str, trace: list[float] | None = None):
        super().__init__(message)
        self.trace = trace or []
