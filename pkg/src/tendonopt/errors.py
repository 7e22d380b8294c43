"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Shapes, indices or parameter values violate an operation's contract."""


class InfeasibleCommand(RuntimeError):
    """No joint configuration within the limits satisfies the slack constraints."""

    def __init__(self, message, motor_angles=None):
        super().__init__(message)
        self.motor_angles = motor_angles


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite or exploded during training."""


class OptimizerAbort(RuntimeError):
    """The objective returned a non-finite value for some candidate."""

    def __init__(self, message, candidate=None):
        super().__init__(message)
        self.candidate = candidate


class ConfigError(ValueError):
    """A configuration file is malformed or violates an invariant."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
