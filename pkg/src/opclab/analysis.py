"""Diagnostics: improvement-bound decomposition, model-error estimators,
the Lipschitz return-gap bound, horizon bound, signed gradient distance, empirical W1
and the OPC return-estimator convergence study.
"""

from dataclasses import dataclass

import numpy as np

from opclab.env import discounted_return, expected_return
from opclab.errors import ContractError
from opclab.rollout import batch_env_rollouts, batch_model_rollouts, batch_opc_rollouts


@dataclass(frozen=True)
class ImprovementReport:
    """``true >= model - off - on`` split of one policy-improvement step.

    ``off_gap`` and ``on_gap`` are the signed versions of the two error
    terms; ``model_improvement + off_gap + on_gap`` reproduces the true
    improvement exactly.
    """

    true_improvement: float
    model_improvement: float
    off_policy_error: float
    on_policy_error: float
    lower_bound: float
    off_gap: float = 0.0
    on_gap: float = 0.0

    def reconstruct(self):
        return self.model_improvement + self.off_gap + self.on_gap


def improvement_report(eta_n, eta_next, eta_model_n, eta_model_next):
    vals = np.array([eta_n, eta_next, eta_model_n, eta_model_next], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ContractError("improvement_report needs finite returns")
    eta_n, eta_next, m_n, m_next = (float(v) for v in vals)
    model_imp = m_next - m_n
    off_gap = eta_next - m_next
    on_gap = m_n - eta_n
    off, on = abs(off_gap), abs(on_gap)
    return ImprovementReport(
        true_improvement=eta_next - eta_n,
        model_improvement=model_imp,
        off_policy_error=off,
        on_policy_error=on,
        lower_bound=model_imp - off - on,
        off_gap=off_gap,
        on_gap=on_gap,
    )


# --- model-error estimators -------------------------------------------------------


def _model_returns(env, model, policy, refs, rng, opc, gamma, averaging):
    if opc:
        sim = batch_opc_rollouts(model, refs, policy, rng, env.reward)
    else:
        sim = batch_model_rollouts(model, policy, refs.states[:, 0], env.T, rng, env.reward)
    return discounted_return(sim.rewards, gamma, averaging)


def on_policy_error(env, model, policy, n_eval, rng, opc=False, averaging="sum"):
    """``|mean env return - mean model return|`` under the data-generating policy.

    With ``opc=True`` the model rolls around the same ``n_eval`` environment
    rollouts that provide the env estimate, so deterministic policies give
    exactly zero.
    """
    refs = batch_env_rollouts(env, policy, n_eval, rng)
    eta = discounted_return(refs.rewards, env.gamma, averaging)
    eta_model = _model_returns(env, model, policy, refs, rng, opc, env.gamma, averaging)
    return float(abs(np.mean(eta) - np.mean(eta_model)))


def off_policy_error(env, model, ref_policy, new_policy, n_eval, rng, opc=False, averaging="sum"):
    """Return gap under ``new_policy`` with references collected under ``ref_policy``."""
    refs = batch_env_rollouts(env, ref_policy, n_eval, rng)
    eta = discounted_return(batch_env_rollouts(env, new_policy, n_eval, rng).rewards, env.gamma, averaging)
    eta_model = _model_returns(env, model, new_policy, refs, rng, opc, env.gamma, averaging)
    return float(abs(np.mean(eta) - np.mean(eta_model)))


# --- return-gap bound -------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzProfile:
    L_f: float
    L_r: float
    L_pi: float
    sigma_pi_bar: float
    gamma: float
    T: int
    n_a: int

    def __post_init__(self):
        for name in ("L_f", "L_r", "L_pi", "sigma_pi_bar"):
            if not getattr(self, name) >= 0:
                raise ContractError(f"{name} must be nonnegative")
        if not 0 <= self.gamma < 1:
            raise ContractError("gamma must lie in [0, 1)")
        if self.T < 1 or self.n_a < 1:
            raise ContractError("T and n_a must be positive")

    @property
    def C1(self):
        return np.sqrt(2.0 * (1.0 + self.L_pi**2)) * self.L_f * self.L_r

    @property
    def C2(self):
        return np.sqrt(self.L_f**2 + self.L_pi**2)


def theorem1_rhs(profile):
    p = profile
    return float(p.sigma_pi_bar / (1.0 - p.gamma) * p.n_a**0.25 * p.C1 * p.C2**p.T * np.sqrt(p.T))


def bell_lipschitz(sigma_r):
    """Max ``|d/ds exp(-(s/sigma_r)^2)|``, attained at ``|s| = sigma_r / sqrt(2)``."""
    return np.sqrt(2.0) * np.exp(-0.5) / sigma_r


def reward_lipschitz(reward, state_box=None):
    if reward.kind == "bell":
        return float(bell_lipschitz(reward.sigma_r))
    if reward.kind == "neg_norm":
        return 1.0
    if state_box is None:
        raise ContractError("quadratic reward gradient is unbounded without a state box")
    lo, hi = (np.asarray(x, dtype=float) for x in state_box)
    ref = reward._ref(np.arange(len(reward.reference))) if reward.reference is not None else np.zeros((1, len(lo)))
    # gradient norm |ref - s| is largest at a box corner
    far = np.maximum(np.abs(ref - lo), np.abs(ref - hi))
    return float(np.max(np.linalg.norm(far, axis=-1)))


def lipschitz_profile_linear(model, policy, reward, state_box=None, gamma=0.9, T=1):
    """Constants for a linear model, Gaussian-linear policy and bell/quadratic reward.

    ``L_pi = ||theta||_2`` holds for Gaussian policies with state-independent
    covariance (the W2 distance between two such Gaussians is the mean gap).
    """
    A = getattr(model, "A_eff", getattr(model, "A", None))
    B = getattr(model, "B_eff", getattr(model, "B", None))
    L_f = np.linalg.norm(np.hstack([A, B]), 2)
    L_pi = np.linalg.norm(policy.theta, 2)
    cov = getattr(policy, "covariance", np.zeros((policy.theta.shape[0],) * 2))
    sigma_bar = np.sqrt(max(np.trace(cov), 0.0))
    return LipschitzProfile(
        float(L_f), reward_lipschitz(reward, state_box), float(L_pi), float(sigma_bar),
        float(gamma), int(T), int(policy.theta.shape[0]),
    )


def theorem1_check(env, model, policy, n_rollouts, rng, state_box=None):
    """Monte Carlo ``|eta - eta_opc|`` under the generalized OPC model, and the bound.

    Each generalized OPC rollout is paired with one environment rollout
    (its fresh reference sample), so both estimates share random numbers.
    Returns ``(lhs, rhs, profile)``.
    """
    refs = batch_env_rollouts(env, policy, n_rollouts, rng)
    sim = batch_opc_rollouts(model, refs, policy, rng, env.reward)
    eta = discounted_return(refs.rewards, env.gamma)
    eta_opc = discounted_return(sim.rewards, env.gamma)
    lhs = float(abs(np.mean(eta) - np.mean(eta_opc)))
    profile = lipschitz_profile_linear(model, policy, env.reward, state_box, env.gamma, env.T)
    return lhs, theorem1_rhs(profile), profile


def horizon_bound(H, gamma):
    if H < 1:
        raise ContractError("H must be >= 1")
    if not 0 <= gamma < 1:
        raise ContractError("gamma must lie in [0, 1)")
    return float(min(H * (H + 1) / 2.0, H / (1.0 - gamma), gamma / (1.0 - gamma) ** 2))


# --- gradient and distribution distances ------------------------------------------


def signed_gradient_distance(g1, g2):
    """Angle gap between two scalar gradients, signed by whether they agree.

    Range ``[-1, 1]``; positive when both signs agree.
    """
    g1, g2 = float(g1), float(g2)
    if not (np.isfinite(g1) and np.isfinite(g2)):
        raise ContractError("gradients must be finite")
    delta = abs(np.arctan(g1) - np.arctan(g2))
    if g1 == 0.0:
        sign = np.sign(g2)
    elif g2 == 0.0:
        sign = np.sign(g1)
    else:
        sign = np.sign(g1) * np.sign(g2)
    return float(sign * delta / np.pi)


def wasserstein1_empirical(p, q, rng=None):
    """W1 between two equal-weight 1-D empirical distributions.

    For unequal sizes the larger sample is bootstrap-resampled down to the
    smaller size so the sorted-pair formula still applies.
    """
    p = np.sort(np.asarray(p, dtype=float).reshape(-1))
    q = np.sort(np.asarray(q, dtype=float).reshape(-1))
    if p.size == 0 or q.size == 0:
        raise ContractError("W1 needs non-empty samples")
    if p.size != q.size:
        rng = np.random.default_rng(0) if rng is None else rng
        if p.size > q.size:
            p = np.sort(rng.choice(p, q.size, replace=True))
        else:
            q = np.sort(rng.choice(q, p.size, replace=True))
    return float(np.mean(np.abs(p - q)))


# --- estimator convergence --------------------------------------------------------


def lemma1_convergence_study(env, model, policy, B_grid, trials, rng, eps=None, averaging="sum", eta=None):
    """Error of the OPC return estimate built from ``B`` fresh references.

    ``eta`` defaults to the exact expected return (closed form for linear
    Gaussian systems). Returns rows
    ``(B, mean_abs_error, tail_prob, estimate_variance, eps)``.
    """
    if not policy.deterministic:
        raise ContractError("the convergence study needs a deterministic policy")
    if eta is None:
        eta = expected_return(env, policy, env.gamma, averaging)
    eps = 0.05 * abs(eta) if eps is None else eps
    rows = []
    for B in B_grid:
        B = int(B)
        refs = batch_env_rollouts(env, policy, B * trials, rng)
        sim = batch_opc_rollouts(model, refs, policy, rng, env.reward)
        est = discounted_return(sim.rewards, env.gamma, averaging).reshape(trials, B).mean(axis=1)
        err = np.abs(est - eta)
        rows.append((B, float(err.mean()), float(np.mean(err > eps)), float(est.var(ddof=1)), float(eps)))
    return rows


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
