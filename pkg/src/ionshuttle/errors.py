"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class GridParseError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


class InfeasibleStep(RuntimeError):
    """No admissible electrode voltage at a synthesis step."""

    def __init__(self, message, step=None, electrode=None):
        super().__init__(message)
        self.step = step
        self.electrode = electrode


class VoltageBoundError(RuntimeError):
    pass


class SingularInput(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class DegenerateLikelihood(RuntimeError):
    pass


class Unidentifiable(ValueError):
    pass


class ObjectiveUnreachable(RuntimeError):
    """No threshold pair meets the calibration objective.

    ``frontier`` holds the Pareto-optimal (t_d, t_b, p_bb, p_db, discard) rows.
    """

    def __init__(self, message, frontier):
        super().__init__(message)
        self.frontier = frontier


class IonEscaped(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state
