"""Analytic linear-Gaussian environments, rewards and rollouts.

All state/action arrays may carry leading batch dimensions; the last axis is
the state (or action) dimension. This lets Monte Carlo studies propagate
thousands of rollouts at once with the same code path used for single steps.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from opclab.errors import ContractError

REWARD_KINDS = ("bell", "quadratic", "neg_norm")


def _as_matrix(x, name):
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2:
        raise ContractError(f"{name} must be a matrix, got shape {np.shape(x)}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name} has non-finite entries")
    return m


def psd_factor(cov):
    """Return ``L`` with ``L @ L.T == cov`` for a symmetric PSD ``cov``.

    Works for singular covariances (unlike Cholesky).
    """
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ContractError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    if vals.min(initial=0.0) < -1e-10 * max(1.0, abs(vals).max(initial=0.0)):
        raise ContractError("covariance must be positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True, eq=False)
class RewardSpec:
    """State reward ``r(s_t, a_t)``; all three kinds ignore the action.

    ``bell``: ``exp(-|s|^2 / sigma_r^2)``.
    ``quadratic``: ``-0.5 |ref_t - s|^2`` against a per-step reference
    (array of shape ``(T + 1, n_s)``, or a single state held constant).
    ``neg_norm``: ``-|s|``.
    """

    kind: str = "bell"
    sigma_r: float = 0.05
    reference: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ContractError(f"unknown reward kind {self.kind!r}")
        if self.kind == "bell" and not self.sigma_r > 0:
            raise ContractError("bell reward needs sigma_r > 0")
        if self.kind == "quadratic" and self.reference is None:
            raise ContractError("quadratic reward needs a reference trajectory")

    def _ref(self, t):
        ref = np.asarray(self.reference, dtype=float)
        if ref.ndim == 1:
            return ref
        return ref[np.minimum(t, len(ref) - 1)]

    def __call__(self, s, t=0):
        s = np.asarray(s, dtype=float)
        if self.kind == "bell":
            return np.exp(-np.sum(s * s, axis=-1) / self.sigma_r**2)
        if self.kind == "quadratic":
            e = self._ref(t) - s
            return -0.5 * np.sum(e * e, axis=-1)
        return -np.linalg.norm(s, axis=-1)

    def grad(self, s, t=0):
        """Gradient of the reward with respect to the state."""
        s = np.asarray(s, dtype=float)
        if self.kind == "bell":
            r = self(s, t)
            return (-2.0 / self.sigma_r**2) * np.asarray(r)[..., None] * s
        if self.kind == "quadratic":
            return self._ref(t) - s
        n = np.linalg.norm(s, axis=-1, keepdims=True)
        return -np.divide(s, n, out=np.zeros_like(s), where=n > 0)


@dataclass(frozen=True, eq=False)
class LinearGaussianEnv:
    """``s' = A s + B a + w`` with ``w ~ N(0, noise_cov)``.

    ``s0`` is the initial-state mean; ``s0_cov`` (optional) makes the initial
    state Gaussian. ``state_box = (low, high)`` defines the terminal
    predicate: a state outside the box is terminal.
    """

    A: np.ndarray
    B: np.ndarray
    noise_cov: np.ndarray
    s0: np.ndarray
    T: int
    gamma: float = 1.0
    reward: RewardSpec = field(default_factory=RewardSpec)
    s0_cov: np.ndarray | None = None
    state_box: tuple | None = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n_s = A.shape[0]
        if A.shape != (n_s, n_s):
            raise ContractError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, "B")
        if B.shape[0] != n_s:
            B = B.T if B.shape[1] == n_s else B
        if B.shape[0] != n_s:
            raise ContractError(f"B has {B.shape[0]} rows, expected {n_s}")
        cov = _as_matrix(self.noise_cov, "noise_cov")
        if cov.shape != (n_s, n_s):
            raise ContractError(f"noise_cov must be {n_s}x{n_s}")
        s0 = np.asarray(self.s0, dtype=float).reshape(-1)
        if s0.shape != (n_s,):
            raise ContractError(f"s0 must have {n_s} entries")
        if int(self.T) < 1:
            raise ContractError("horizon T must be >= 1")
        if not 0.0 <= float(self.gamma) <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "noise_cov", cov)
        object.__setattr__(self, "s0", s0)
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "_noise_L", psd_factor(cov))
        if self.s0_cov is not None:
            c0 = _as_matrix(self.s0_cov, "s0_cov")
            object.__setattr__(self, "s0_cov", c0)
            object.__setattr__(self, "_s0_L", psd_factor(c0))
        else:
            object.__setattr__(self, "_s0_L", None)
        if self.state_box is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n_s,)) for b in self.state_box)
            object.__setattr__(self, "state_box", (lo, hi))

    @property
    def n_s(self):
        return self.A.shape[0]

    @property
    def n_a(self):
        return self.B.shape[1]

    @property
    def deterministic(self):
        return not np.any(self.noise_cov)

    def mean_step(self, s, a):
        return s @ self.A.T + a @ self.B.T

    def check_dims(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if s.shape[-1:] != (self.n_s,):
            raise ContractError(f"state has trailing dim {s.shape[-1:]}, expected {self.n_s}")
        if a.shape[-1:] != (self.n_a,):
            raise ContractError(f"action has trailing dim {a.shape[-1:]}, expected {self.n_a}")
        return s, a

    def sample_noise(self, shape, rng):
        """Process noise of shape ``shape + (n_s,)``; zeros (no draw) if deterministic."""
        if self.deterministic:
            return np.zeros(tuple(shape) + (self.n_s,))
        z = rng.standard_normal(tuple(shape) + (self.n_s,))
        return z @ self._noise_L.T

    def step(self, s, a, rng=None, noise=None):
        s, a = self.check_dims(s, a)
        nxt = self.mean_step(s, a)
        if noise is not None:
            return nxt + noise
        if self.deterministic:
            return nxt
        return nxt + self.sample_noise(np.shape(nxt)[:-1], rng)

    def initial_state(self, rng=None, size=None):
        shape = () if size is None else (size,)
        s = np.broadcast_to(self.s0, shape + (self.n_s,)).copy()
        if self._s0_L is not None:
            s += rng.standard_normal(shape + (self.n_s,)) @ self._s0_L.T
        return s

    def is_terminal(self, s):
        if self.state_box is None:
            return np.zeros(np.shape(s)[:-1], dtype=bool)
        lo, hi = self.state_box
        return np.any((s < lo) | (s > hi), axis=-1)


def env_step(env, s, a, rng=None):
    """One transition ``A s + B a + w``."""
    return env.step(s, a, rng)


@dataclass(frozen=True)
class Transition:
    t: int
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool = False


@dataclass(eq=False)
class Trajectory:
    """Ordered transitions of one on-environment rollout.

    ``iteration`` is the MBRL iteration that produced it and ``index`` its
    rollout index ``b`` (1-based) within that iteration.
    """

    transitions: list
    iteration: int = 0
    index: int = 1

    def __post_init__(self):
        self.transitions = list(self.transitions)
        for k, tr in enumerate(self.transitions):
            if tr.t != k:
                raise ContractError("transition time indices must run 0, 1, 2, ...")
            if tr.terminal and k != len(self.transitions) - 1:
                raise ContractError("a terminal transition must be the last one")

    @classmethod
    def from_arrays(cls, states, actions, rewards=None, terminals=None, iteration=0, index=1):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if actions.ndim == 1:
            actions = actions[:, None]
        n = len(actions)
        if len(states) != n + 1:
            raise ContractError("need exactly one more state than actions")
        rewards = np.zeros(n) if rewards is None else np.asarray(rewards, dtype=float)
        terminals = np.zeros(n, dtype=bool) if terminals is None else np.asarray(terminals, dtype=bool)
        trs = [
            Transition(t, states[t].copy(), actions[t].copy(), states[t + 1].copy(),
                       float(rewards[t]), bool(terminals[t]))
            for t in range(n)
        ]
        return cls(trs, iteration, index)

    def __len__(self):
        return len(self.transitions)

    @cached_property
    def states(self):
        """States ``s_0 .. s_L`` as an ``(L + 1, n_s)`` array."""
        if not self.transitions:
            raise ContractError("empty trajectory")
        return np.array([tr.state for tr in self.transitions] + [self.transitions[-1].next_state])

    @cached_property
    def actions(self):
        return np.array([tr.action for tr in self.transitions])

    @cached_property
    def rewards(self):
        return np.array([tr.reward for tr in self.transitions])

    @property
    def terminated(self):
        return bool(self.transitions) and self.transitions[-1].terminal


def rollout_env(env, policy, rng=None, iteration=0, index=1):
    """Roll ``policy`` on ``env`` for ``env.T`` steps (or until a terminal state)."""
    s = env.initial_state(rng)
    out = []
    for t in range(env.T):
        a = np.asarray(policy.act(s, rng), dtype=float)
        s_next = env.step(s, a, rng)
        terminal = bool(env.is_terminal(s_next))
        out.append(Transition(t, s, a, s_next, float(env.reward(s, t)), terminal))
        if terminal:
            break
        s = s_next
    return Trajectory(out, iteration, index)


def discounted_return(traj, gamma=1.0, averaging="sum"):
    """``sum_t gamma^t r_t`` or, with ``averaging="mean"``, ``(1/L) sum_t r_t``.

    Accepts a :class:`Trajectory` or an array of rewards whose last axis is
    time.
    """
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if rewards.shape[-1] == 0:
        raise ContractError("cannot compute the return of an empty trajectory")
    if averaging == "mean":
        return np.mean(rewards, axis=-1)
    if averaging != "sum":
        raise ContractError(f"averaging must be 'sum' or 'mean', got {averaging!r}")
    disc = gamma ** np.arange(rewards.shape[-1])
    return rewards @ disc


def closed_loop_gain(A, dA, B, dB, theta):
    return (A + dA) + (B + dB) * theta


def closed_loop_stable(A, dA, B, dB, theta, margin=1e-9):
    """Scalar closed loop is stable iff ``|A + dA + (B + dB) theta| <= 1 - margin``."""
    return bool(abs(closed_loop_gain(A, dA, B, dB, theta)) <= 1.0 - margin)


def scalar_env(A=1.0, B=1.0, s0=1.0, T=60, sigma_r=0.05, noise_var=0.0, gamma=1.0):
    """The 1D deterministic test system (defaults: A = B = s0 = 1, T = 60)."""
    return LinearGaussianEnv(
        A=[[A]], B=[[B]], noise_cov=[[noise_var]], s0=[s0], T=T, gamma=gamma,
        reward=RewardSpec("bell", sigma_r),
    )


def double_integrator(dt=0.1, velocity_noise_var=0.01, s0=(1.0, 0.0), T=30, sigma_r=0.5, gamma=1.0):
    """Position/velocity double integrator with noise on the velocity only."""
    return LinearGaussianEnv(
        A=[[1.0, dt], [0.0, 1.0]],
        B=[[0.0], [dt]],
        noise_cov=np.diag([0.0, velocity_noise_var]),
        s0=list(s0),
        T=T,
        gamma=gamma,
        reward=RewardSpec("bell", sigma_r),
    )


def closed_loop_moments(env, theta, action_cov=None, steps=None):
    """Mean and covariance of ``s_0..s_steps`` under ``a = theta s + N(0, action_cov)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    F = env.A + env.B @ theta
    Q = env.noise_cov.copy()
    if action_cov is not None:
        Q = Q + env.B @ np.atleast_2d(action_cov) @ env.B.T
    steps = env.T if steps is None else steps
    mu = env.s0.copy()
    S = np.zeros((env.n_s, env.n_s)) if env.s0_cov is None else env.s0_cov.copy()
    means, covs = [mu], [S]
    for _ in range(steps):
        mu = F @ mu
        S = F @ S @ F.T + Q
        means.append(mu)
        covs.append(S)
    return np.array(means), np.array(covs)


def expected_reward_gaussian(reward, mean, cov, t=0):
    """Closed-form ``E[r(s)]`` for ``s ~ N(mean, cov)`` (bell or quadratic rewards)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(cov)
    n = mean.shape[-1]
    if reward.kind == "bell":
        s2 = reward.sigma_r**2
        det = np.linalg.det(np.eye(n) + (2.0 / s2) * cov)
        quad = mean @ np.linalg.solve(cov + 0.5 * s2 * np.eye(n), mean)
        return float(np.exp(-0.5 * quad) / np.sqrt(det))
    if reward.kind == "quadratic":
        e = reward._ref(t) - mean
        return float(-0.5 * (e @ e + np.trace(cov)))
    raise ContractError("no closed form for the expected neg_norm reward")


def expected_return(env, policy, gamma=None, averaging="sum"):
    """Exact expected return of a linear(-Gaussian) policy on a linear-Gaussian env."""
    gamma = env.gamma if gamma is None else gamma
    means, covs = closed_loop_moments(env, policy.theta, getattr(policy, "covariance", None))
    r = np.array([expected_reward_gaussian(env.reward, means[t], covs[t], t) for t in range(env.T)])
    return float(discounted_return(r, gamma, averaging))
