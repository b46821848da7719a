"""Linear policies, return gradients and the clipped gradient-ascent improver."""

from dataclasses import dataclass

import numpy as np

from opclab.env import closed_loop_stable, psd_factor
from opclab.errors import ContractError, UnstableClosedLoopError


def _theta(theta):
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(th)):
        raise ContractError("policy gain has non-finite entries")
    return th


@dataclass(frozen=True, eq=False)
class LinearPolicy:
    """Deterministic ``a = theta s`` with ``theta`` of shape ``(n_a, n_s)``."""

    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _theta(self.theta))

    @property
    def covariance(self):
        return np.zeros((self.theta.shape[0],) * 2)

    @property
    def deterministic(self):
        return True

    def mean(self, s):
        s = np.asarray(s, dtype=float)
        if s.shape[-1:] != self.theta.shape[1:]:
            raise ContractError(f"state dim {s.shape[-1:]} does not match policy {self.theta.shape}")
        return s @ self.theta.T

    def act(self, s, rng=None):
        return self.mean(s)

    def with_theta(self, theta):
        return LinearPolicy(theta)


@dataclass(frozen=True, eq=False)
class GaussianLinearPolicy:
    """``a = theta s + beta * eps`` with ``eps ~ N(0, sigma)``.

    The effective action covariance is ``beta**2 * sigma``; ``beta`` scales
    how far a behaviour policy strays from the reference policy's noise.
    """

    theta: np.ndarray
    sigma: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        th = _theta(self.theta)
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (th.shape[0],) * 2:
            raise ContractError(f"sigma must be {th.shape[0]}x{th.shape[0]}")
        if self.beta < 0:
            raise ContractError("beta must be non-negative")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "_L", psd_factor(sigma))

    @property
    def covariance(self):
        return self.beta**2 * self.sigma

    @property
    def deterministic(self):
        return self.beta == 0.0 or not np.any(self.sigma)

    def mean(self, s):
        s = np.asarray(s, dtype=float)
        if s.shape[-1:] != self.theta.shape[1:]:
            raise ContractError(f"state dim {s.shape[-1:]} does not match policy {self.theta.shape}")
        return s @ self.theta.T

    def noise(self, shape, rng):
        """Standard draws ``eps`` (shape ``shape + (n_a,)``) before scaling by beta."""
        z = rng.standard_normal(tuple(shape) + (self.theta.shape[0],))
        return z @ self._L.T

    def act(self, s, rng, eps=None):
        m = self.mean(s)
        if eps is None:
            if self.deterministic:
                return m
            eps = self.noise(m.shape[:-1], rng)
        return m + self.beta * eps

    def with_theta(self, theta):
        return GaussianLinearPolicy(theta, self.sigma, self.beta)

    def with_beta(self, beta):
        return GaussianLinearPolicy(self.theta, self.sigma, beta)


def act(policy, s, rng=None):
    return policy.act(s, rng)


def bell_reward_derivative(s, sigma_r):
    """d/ds of ``exp(-(s / sigma_r)^2)``."""
    return -2.0 * s / sigma_r**2 * np.exp(-((s / sigma_r) ** 2))


def return_and_gradient_1d(A, B, theta, s0=1.0, sigma_r=0.05, T=60, reference=None):
    """Mean-averaged bell return and its exact theta-derivative for a scalar system.

    Without ``reference`` the states follow ``s_{t+1} = (A + B theta) s_t``.
    With ``reference = (ref_states, ref_actions)`` the OPC model is used,
    ``s_{t+1} = ref_{t+1} + [(A s_t + B theta s_t) - (A ref_t + B ref_a_t)]``,
    whose sensitivity obeys the same recursion
    ``ds_{t+1} = (A + B theta) ds_t + B s_t`` because the reference does not
    depend on theta.
    """
    s, ds = float(s0), 0.0
    ret, grad = 0.0, 0.0
    if reference is not None:
        ref_s, ref_a = (np.asarray(x, dtype=float).reshape(-1) for x in reference)
        if len(ref_s) < T + 1 or len(ref_a) < T:
            raise ContractError("reference trajectory shorter than the horizon")
    gain = A + B * theta
    for t in range(T):
        ret += np.exp(-((s / sigma_r) ** 2))
        grad += bell_reward_derivative(s, sigma_r) * ds
        if reference is None:
            s_next = gain * s
        else:
            s_next = ref_s[t + 1] + ((A * s + B * (theta * s)) - (A * ref_s[t] + B * ref_a[t]))
        ds = gain * ds + B * s
        s = s_next
    return ret / T, grad / T


def exact_return_gradient_1d(A, B, theta, s0=1.0, sigma_r=0.05, T=60, reference=None, margin=1e-9):
    """Exact policy gradient of the time-averaged bell return (scalar system).

    ``A`` and ``B`` are the matrices used for prediction (true system or a
    model including injected errors). Refuses closed loops that are not
    strictly stable.
    """
    if not closed_loop_stable(A, 0.0, B, 0.0, theta, margin):
        raise UnstableClosedLoopError(f"|A + B theta| = {abs(A + B * theta):.6g} is not < 1")
    return return_and_gradient_1d(A, B, theta, s0, sigma_r, T, reference)[1]


def fd_policy_gradient(return_fn, theta, h=1e-5):
    """Central finite-difference gradient of ``return_fn`` at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    flat = theta.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        up = return_fn((flat + e).reshape(theta.shape))
        down = return_fn((flat - e).reshape(theta.shape))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ContractError(f"non-finite return near theta coordinate {i}")
        g.reshape(-1)[i] = (up - down) / (2.0 * h)
    return g


def improve_policy(policy, return_fn, step_size=0.05, steps=1, eps_pi=0.04, h=1e-5, gradient_fn=None):
    """Clipped gradient ascent on ``return_fn`` (a map theta -> return).

    ``steps`` plain ascent updates of size ``step_size * grad`` are taken; the
    total move is then projected so that ``|theta_new - theta_old|^2 <= eps_pi``.
    ``gradient_fn`` overrides the finite-difference estimator.
    """
    theta0 = policy.theta
    theta = theta0.copy()
    radius = np.sqrt(eps_pi)
    for _ in range(steps):
        g = gradient_fn(theta) if gradient_fn is not None else fd_policy_gradient(return_fn, theta, h)
        theta = theta + step_size * np.asarray(g, dtype=float).reshape(theta.shape)
        delta = theta - theta0
        norm = np.linalg.norm(delta)
        if norm > radius:
            theta = theta0 + delta * (radius / norm)
    return policy.with_theta(theta)
