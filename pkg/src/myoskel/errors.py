"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class UncontrollableJointError(ValueError):
    """A joint is left without any healthy muscle to drive it."""


class SimulationDivergedError(RuntimeError):
    """The plant produced a non-finite quantity."""

    def __init__(self, quantity, time):
        super().__init__(f"simulation diverged: non-finite {quantity} at t={time:.6f}s")
        self.quantity = quantity
        self.time = time


class ScenarioError(ValueError):
    """A scenario or configuration file could not be parsed or validated."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""
