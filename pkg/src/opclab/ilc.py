"""Norm-optimal iterative learning control on lifted linear systems.

Stacked vectors are time-major: ``s = [s_0; s_1; ..; s_T]`` of length
``n_s (T + 1)`` and ``u = [u_0; ..; u_{T-1}]`` of length ``n_a T``. The
initial state is taken as zero; a nonzero ``s_0`` belongs in ``d``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from opclab.errors import ContractError, SingularSystemError

RCOND_MIN = 1e-12


@dataclass(frozen=True, eq=False)
class LiftedSystem:
    F: np.ndarray
    n_s: int
    n_a: int
    T: int

    def block(self, i, j):
        return self.F[i * self.n_s:(i + 1) * self.n_s, j * self.n_a:(j + 1) * self.n_a]

    def simulate(self, u, d=None):
        s = self.F @ np.asarray(u, dtype=float).reshape(-1)
        return s if d is None else s + np.asarray(d, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class IlcWeights:
    M: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        for name in ("M", "W"):
            X = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if X.shape[0] != X.shape[1] or not np.allclose(X, X.T, atol=1e-12):
                raise ContractError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(X).min() < -1e-10 * max(1.0, np.abs(X).max()):
                raise ContractError(f"{name} must be positive semi-definite")
            object.__setattr__(self, name, X)

    @classmethod
    def identity(cls, lifted, w=0.0):
        return cls(np.eye(lifted.F.shape[0]), w * np.eye(lifted.F.shape[1]))


def _mat(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def build_lifted(A, B, T):
    """``F`` with block ``(i, j) = A^{i-j-1} B`` below the diagonal."""
    A, B = _mat(A), _mat(B)
    if T < 1:
        raise ContractError("T must be >= 1")
    n_s, n_a = B.shape
    if A.shape != (n_s, n_s):
        raise ContractError(f"A{A.shape} and B{B.shape} do not match")
    powers = [B]
    for _ in range(T - 1):
        powers.append(A @ powers[-1])
    F = np.zeros((n_s * (T + 1), n_a * T))
    for i in range(1, T + 1):
        for j in range(i):
            F[i * n_s:(i + 1) * n_s, j * n_a:(j + 1) * n_a] = powers[i - j - 1]
    return LiftedSystem(F, n_s, n_a, T)


def build_lifted_timevarying(A_list, B_list):
    """Time-varying ``F``: block ``(i, j) = A_{i-1} ... A_{j+1} B_j``.

    This is the state-transition product of ``s_{t+1} = A_t s_t + B_t u_t``;
    ``A_0`` never appears because the initial state is zero.
    """
    A_list = [_mat(A) for A in A_list]
    B_list = [_mat(B) for B in B_list]
    T = len(A_list)
    if T < 1 or len(B_list) != T:
        raise ContractError("A_t and B_t lists must both have length T >= 1")
    n_s, n_a = B_list[0].shape
    for A, B in zip(A_list, B_list):
        if A.shape != (n_s, n_s) or B.shape != (n_s, n_a):
            raise ContractError("inconsistent A_t/B_t dimensions")
    F = np.zeros((n_s * (T + 1), n_a * T))
    for j in range(T):
        blk = B_list[j]
        for i in range(j + 1, T + 1):
            if i > j + 1:
                blk = A_list[i - 1] @ blk
            F[i * n_s:(i + 1) * n_s, j * n_a:(j + 1) * n_a] = blk
    return LiftedSystem(F, n_s, n_a, T)


def stack(states, actions):
    """Time-major stacking of a ``(T+1, n_s)`` state and ``(T, n_a)`` action array."""
    return np.asarray(states, dtype=float).reshape(-1), np.asarray(actions, dtype=float).reshape(-1)


def estimate_disturbance(traj, F):
    """``d = s - F u`` for a trajectory (or a ``(states, actions)`` pair)."""
    states, actions = (traj.states, traj.actions) if hasattr(traj, "states") else traj
    s, u = stack(states, actions)
    F = F.F if isinstance(F, LiftedSystem) else np.asarray(F, dtype=float)
    if F.shape != (s.size, u.size):
        raise ContractError(f"trajectory sizes ({s.size}, {u.size}) do not match F{F.shape}")
    return s - F @ u


def _spd_solve(K, rhs):
    K = 0.5 * (K + K.T)
    ev = np.linalg.eigvalsh(K)
    if ev[-1] <= 0 or ev[0] / ev[-1] < RCOND_MIN:
        raise SingularSystemError(
            f"system matrix is singular or ill-conditioned (rcond {ev[0] / ev[-1] if ev[-1] > 0 else 0.0:.3g})"
        )
    return cho_solve(cho_factor(K), rhs)


def _F(F):
    return F.F if isinstance(F, LiftedSystem) else np.asarray(F, dtype=float)


def noilc_update(u_prev, error_prev, F, weights):
    """``u + (F^T M F + W)^{-1} F^T M e``."""
    F = _F(F)
    u = np.asarray(u_prev, dtype=float).reshape(-1)
    e = np.asarray(error_prev, dtype=float).reshape(-1)
    M, W = weights.M, weights.W
    if e.size != F.shape[0] or u.size != F.shape[1] or M.shape[0] != e.size or W.shape[0] != u.size:
        raise ContractError("dimension mismatch between u, e, F and the weights")
    FtM = F.T @ M
    return u + _spd_solve(FtM @ F + W, FtM @ e)


def mbrl_closed_form(r_bar, states, u, F, C_pi):
    """Reduced MBRL step ``u + (F^T F + C_pi)^{-1} F^T (r_bar - s)``.

    Solved as the stacked least-squares problem
    ``min |[F; sqrt(C_pi)] du - [r_bar - s; 0]|``.
    """
    F = _F(F)
    e = np.asarray(r_bar, dtype=float).reshape(-1) - np.asarray(states, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    C = _mat(C_pi)
    if C.shape == (1, 1) and u.size > 1:
        C = C[0, 0] * np.eye(u.size)
    if np.any(C - np.diag(np.diag(C))) or np.any(np.diag(C) < 0):
        raise ContractError("C_pi must be diagonal and nonnegative")
    ev = np.linalg.eigvalsh(F.T @ F + C)
    if ev[-1] <= 0 or ev[0] / ev[-1] < RCOND_MIN:
        raise SingularSystemError("F^T F + C_pi is singular or ill-conditioned")
    G = np.vstack([F, np.diag(np.sqrt(np.diag(C)))])
    rhs = np.concatenate([e, np.zeros(u.size)])
    du, *_ = np.linalg.lstsq(G, rhs, rcond=None)
    return u + du


def ilc_objective(e, F, du, weights):
    """``0.5 |e - F du|_M^2 + 0.5 |du|_W^2``."""
    F = _F(F)
    r = np.asarray(e, dtype=float).reshape(-1) - F @ np.asarray(du, dtype=float).reshape(-1)
    du = np.asarray(du, dtype=float).reshape(-1)
    return float(0.5 * r @ weights.M @ r + 0.5 * du @ weights.W @ du)


def repetitive_disturbance(A, B, T, s0=None, offsets=None):
    """Lifted ``d`` for ``s_{t+1} = A s_t + B u_t + offsets_t`` from ``s_0``."""
    A = _mat(A)
    n_s = A.shape[0]
    s = np.zeros(n_s) if s0 is None else np.asarray(s0, dtype=float).reshape(n_s)
    off = np.zeros((T, n_s)) if offsets is None else np.asarray(offsets, dtype=float).reshape(T, n_s)
    d = [s]
    for t in range(T):
        s = A @ s + off[t]
        d.append(s)
    return np.concatenate(d)


def ilc_iterate(lifted, d, r_bar, u0, weights, iterations):
    """Run NO-ILC against a fixed disturbance ``d``.

    Returns ``(errors, u)`` where ``errors[j] = |r_bar - s^{(j)}|_M`` for
    ``j = 0..iterations`` and ``u`` is the final input sequence.
    """
    u = np.asarray(u0, dtype=float).reshape(-1)
    r_bar = np.asarray(r_bar, dtype=float).reshape(-1)
    errors = []
    for j in range(iterations + 1):
        e = r_bar - lifted.simulate(u, d)
        errors.append(float(np.sqrt(max(e @ weights.M @ e, 0.0))))
        if j < iterations:
            u = noilc_update(u, e, lifted, weights)
    return errors, u


def random_instance(rng, max_ns=3, max_na=3, max_T=8):
    """Random ``(lifted, u, s, r_bar, C_pi)`` for equivalence checks."""
    n_s = int(rng.integers(1, max_ns + 1))
    n_a = int(rng.integers(1, max_na + 1))
    T = int(rng.integers(1, max_T + 1))
    A = rng.normal(size=(n_s, n_s)) / np.sqrt(n_s)
    B = rng.normal(size=(n_s, n_a))
    lifted = build_lifted(A, B, T)
    u = rng.normal(size=n_a * T)
    d = rng.normal(size=n_s * (T + 1))
    s = lifted.simulate(u, d)
    r_bar = rng.normal(size=s.size)
    C_pi = np.diag(rng.uniform(0.1, 2.0, size=n_a * T))
    return lifted, u, s, r_bar, C_pi
