"""Model-based RL with on-policy corrections on analytic environments."""

from opclab.env import (
    LinearGaussianEnv,
    RewardSpec,
    Trajectory,
    Transition,
    closed_loop_stable,
    discounted_return,
    double_integrator,
    env_step,
    rollout_env,
    scalar_env,
)
from opclab.errors import (
    ConfigError,
    ContractError,
    OutOfDataError,
    SingularFitError,
    SingularSystemError,
    UnstableClosedLoopError,
)
from opclab.rng import make_rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "LinearGaussianEnv",
    "OutOfDataError",
    "RewardSpec",
    "SingularFitError",
    "SingularSystemError",
    "Trajectory",
    "Transition",
    "UnstableClosedLoopError",
    "closed_loop_stable",
    "discounted_return",
    "double_integrator",
    "env_step",
    "make_rng",
    "rollout_env",
    "scalar_env",
]
