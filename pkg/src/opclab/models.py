"""Transition models: replay buffer, learned linear, time-offset, ensemble and OPC.

Every parametric model exposes ``mean(s, a, t=None)``, the deterministic
mean prediction used by the OPC correction. ``s`` and ``a`` may be batched.
"""

from dataclasses import dataclass

import numpy as np

from opclab.buffer import ReplayBuffer
from opclab.env import Trajectory, psd_factor
from opclab.errors import ContractError, OutOfDataError, SingularFitError

RANK_TOL = 1e-10


def _mat(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class LearnedLinearModel:
    """``s' ~ N((A + dA) s + (B + dB) a + d, noise_cov)``.

    ``dA``/``dB`` are injected errors added on top of the fitted (or true)
    matrices for controlled-mismatch studies.
    """

    A: np.ndarray
    B: np.ndarray
    d: np.ndarray | None = None
    dA: np.ndarray | None = None
    dB: np.ndarray | None = None
    noise_cov: np.ndarray | None = None
    residual: float | None = None

    def __post_init__(self):
        A, B = _mat(self.A), _mat(self.B)
        n_s = A.shape[0]
        if A.shape != (n_s, n_s) or B.shape[0] != n_s:
            raise ContractError(f"inconsistent model shapes A{A.shape} B{B.shape}")
        d = np.zeros(n_s) if self.d is None else np.asarray(self.d, dtype=float).reshape(n_s)
        dA = np.zeros_like(A) if self.dA is None else np.broadcast_to(_mat(self.dA), A.shape).copy()
        dB = np.zeros_like(B) if self.dB is None else np.broadcast_to(_mat(self.dB), B.shape).copy()
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "dA", dA)
        object.__setattr__(self, "dB", dB)
        if self.noise_cov is not None:
            cov = _mat(self.noise_cov)
            object.__setattr__(self, "noise_cov", cov)
            object.__setattr__(self, "_L", psd_factor(cov))

    @property
    def n_s(self):
        return self.A.shape[0]

    @property
    def n_a(self):
        return self.B.shape[1]

    @property
    def A_eff(self):
        return self.A + self.dA

    @property
    def B_eff(self):
        return self.B + self.dB

    def with_error(self, dA=None, dB=None):
        return LearnedLinearModel(self.A, self.B, self.d, dA, dB, self.noise_cov, self.residual)

    def mean(self, s, a, t=None):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if s.shape[-1:] != (self.n_s,) or a.shape[-1:] != (self.n_a,):
            raise ContractError("state/action dimensions do not match the model")
        return s @ self.A_eff.T + a @ self.B_eff.T + self.d

    def sample(self, s, a, rng, t=None):
        m = self.mean(s, a, t)
        if self.noise_cov is None or not np.any(self.noise_cov):
            return m
        return m + rng.standard_normal(m.shape) @ self._L.T


@dataclass(frozen=True, eq=False)
class TimeOffsetModel:
    """``f_t(s, a) = A s + B a + d_t`` with one learned offset per time step."""

    A: np.ndarray
    B: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _mat(self.A))
        object.__setattr__(self, "B", _mat(self.B))
        off = np.asarray(self.offsets, dtype=float)
        if off.ndim == 1:
            off = off[:, None]
        object.__setattr__(self, "offsets", off)

    @property
    def T(self):
        return len(self.offsets)

    def mean(self, s, a, t=None):
        if t is None:
            raise ContractError("time-offset model needs the time index")
        return np.asarray(s) @ self.A.T + np.asarray(a) @ self.B.T + self.offsets[t]

    def sample(self, s, a, rng, t=None):
        return self.mean(s, a, t)


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ContractError("an ensemble needs at least one member")
        shapes = {(m.A.shape, m.B.shape) for m in members}
        if len(shapes) != 1:
            raise ContractError("ensemble members must share dimensions")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def mean(self, s, a, t=None):
        return np.mean([m.mean(s, a, t) for m in self.members], axis=0)

    def sample(self, s, a, rng, t=None):
        k = int(rng.integers(len(self.members)))
        return self.members[k].sample(s, a, rng, t)


def model_mean(model, s, a, t=None):
    """Deterministic mean next-state prediction of any parametric model."""
    return model.mean(s, a, t)


def _regression_arrays(data):
    if isinstance(data, ReplayBuffer):
        data = data.transitions()
    elif isinstance(data, Trajectory):
        data = data.transitions
    if isinstance(data, tuple) and len(data) == 3:
        S, U, S1 = (np.asarray(x, dtype=float) for x in data)
        S, U, S1 = (x[:, None] if x.ndim == 1 else x for x in (S, U, S1))
    else:
        data = list(data)
        S = np.array([tr.state for tr in data], dtype=float)
        U = np.array([tr.action for tr in data], dtype=float)
        S1 = np.array([tr.next_state for tr in data], dtype=float)
    if not (len(S) == len(U) == len(S1)):
        raise ContractError("states, actions and next states must have equal counts")
    return S, U, S1


def _regressor_names(n_s, n_a):
    return [f"state[{i}]" for i in range(n_s)] + [f"action[{j}]" for j in range(n_a)] + ["bias"]


def fit_least_squares(data, ridge=0.0):
    """Fit ``s' = A s + B a + d`` by ordinary (or ridge) least squares.

    ``data`` is an iterable of transitions, a buffer, a trajectory, or a tuple
    ``(states, actions, next_states)`` of 2-D arrays. The residual noise
    covariance is stored on the model but the mean is what OPC uses.
    """
    S, U, S1 = _regression_arrays(data)
    n, n_s = S.shape
    n_a = U.shape[1]
    p = n_s + n_a + 1
    X = np.hstack([S, U, np.ones((n, 1))])
    names = _regressor_names(n_s, n_a)
    if ridge > 0:
        reg = ridge * np.eye(p)
        reg[-1, -1] = 0.0
        W = np.linalg.solve(X.T @ X + reg, X.T @ S1)
    else:
        if n < p:
            raise SingularFitError(f"need at least {p} transitions, got {n}", dimension=None)
        _, sv, Vt = np.linalg.svd(X, full_matrices=False)
        if sv[-1] <= RANK_TOL * sv[0]:
            k = int(np.argmax(np.abs(Vt[-1])))
            raise SingularFitError(
                f"regressor matrix is rank deficient along {names[k]}", dimension=names[k]
            )
        W, *_ = np.linalg.lstsq(X, S1, rcond=None)
    A = W[:n_s].T
    B = W[n_s: n_s + n_a].T
    d = W[-1]
    R = S1 - X @ W
    residual = float(np.sum(R * R))
    dof = max(n - p, 1)
    noise_cov = R.T @ R / dof
    return LearnedLinearModel(A, B, d, noise_cov=0.5 * (noise_cov + noise_cov.T), residual=residual)


def bootstrap_ensemble(data, n_members, rng, ridge=0.0):
    """Ensemble of least-squares fits on bootstrap resamples of ``data``."""
    S, U, S1 = _regression_arrays(data)
    members = []
    for _ in range(n_members):
        idx = rng.integers(0, len(S), size=len(S))
        members.append(fit_least_squares((S[idx], U[idx], S1[idx]), ridge=ridge))
    return EnsembleModel(tuple(members))


def fit_time_offsets(traj, A, B):
    """Per-step offsets ``d_t = s_{t+1} - (A s_t + B a_t)`` along one trajectory."""
    A, B = _mat(A), _mat(B)
    S, U = traj.states, traj.actions
    offsets = S[1:] - (S[:-1] @ A.T + U @ B.T)
    return TimeOffsetModel(A, B, offsets)


def _as_buffer(buffer):
    if isinstance(buffer, ReplayBuffer):
        return buffer
    if isinstance(buffer, Trajectory):
        return ReplayBuffer([buffer])
    return ReplayBuffer(buffer)


def _reference(buffer, t, b):
    try:
        traj = buffer[b]
    except IndexError:
        raise OutOfDataError(f"no reference trajectory b={b}") from None
    if t < 0 or t >= len(traj):
        raise OutOfDataError(f"t={t} is past the end of reference trajectory b={b} (length {len(traj)})")
    return traj.transitions[t]


class ReplayModel:
    """Non-parametric model replaying recorded next states, ignoring actions."""

    def __init__(self, buffer):
        self.buffer = _as_buffer(buffer)

    def step(self, t, b, s=None, a=None):
        return _reference(self.buffer, t, b).next_state.copy()


class OpcModel:
    """On-policy corrected model around reference trajectories.

    ``s_{t+1} = ref_{t+1} + [f(s, a) - f(ref_t, ref_a_t)]`` where ``f`` is the
    inner model's mean. The bracket vanishes exactly when the query equals
    the recorded pair, so on-policy replay reproduces the data bit for bit.
    """

    def __init__(self, inner, buffer):
        self.inner = inner
        self.buffer = _as_buffer(buffer)

    def correction(self, s, a, ref_s, ref_a, t=None):
        return self.inner.mean(s, a, t) - self.inner.mean(ref_s, ref_a, t)

    def step(self, s, a, t, b):
        tr = _reference(self.buffer, t, b)
        return tr.next_state + self.correction(np.asarray(s, float), np.asarray(a, float), tr.state, tr.action, t)


def replay_step(model, t, b):
    return model.step(t, b)


def opc_step(model, s, a, t, b):
    return model.step(s, a, t, b)


def opc_predict(inner, s, a, ref_s, ref_a, ref_next, t=None):
    """Batched OPC transition given explicit reference arrays."""
    return ref_next + (inner.mean(s, a, t) - inner.mean(ref_s, ref_a, t))


def generalized_opc_step(env, inner, s, a, s_ref, a_ref, rng, noise=None):
    """Analysis-only OPC step: a fresh environment sample from the reference pair, corrected."""
    ref_next = env.step(s_ref, a_ref, rng, noise=noise)
    return opc_predict(inner, s, a, s_ref, a_ref, ref_next)


def opc_per_member(ensemble, buffer):
    """One OPC model per ensemble member, all sharing ``buffer``."""
    members = ensemble.members if isinstance(ensemble, EnsembleModel) else tuple(ensemble)
    if not members:
        raise ContractError("empty ensemble")
    buffer = _as_buffer(buffer)
    return [OpcModel(m, buffer) for m in members]
