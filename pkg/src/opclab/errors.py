"""Exception types shared across the package."""

import numpy as np


class ContractError(ValueError):
    """Inputs violate a precondition (wrong dimensions, bad ranges)."""


class OutOfDataError(IndexError):
    """A replay or OPC query ran past the end of its reference trajectory."""


class SingularFitError(np.linalg.LinAlgError):
    """Least-squares regressors do not span the parameter space."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class SingularSystemError(np.linalg.LinAlgError):
    """A linear system matrix is singular or numerically close to it."""


class UnstableClosedLoopError(ValueError):
    """Closed-loop gain has magnitude at or above one."""


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
