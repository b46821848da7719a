"""Study runners: one :class:`ResultTable` per CLI subcommand."""

import numpy as np

from opclab.analysis import (
    lemma1_convergence_study,
    signed_gradient_distance,
    theorem1_check,
    wasserstein1_empirical,
)
from opclab.env import LinearGaussianEnv, RewardSpec, closed_loop_stable, double_integrator, expected_return, scalar_env
from opclab.ilc import IlcWeights, ilc_objective, mbrl_closed_form, noilc_update, random_instance
from opclab.models import LearnedLinearModel
from opclab.policy import GaussianLinearPolicy, LinearPolicy, return_and_gradient_1d
from opclab.rng import make_rng
from opclab.rollout import (
    MbrlConfig,
    batch_env_rollouts,
    batch_model_rollouts,
    batch_opc_rollouts,
    default_improver,
    mbrl_loop,
)
from opclab.tables import ResultTable


def _table(cfg, columns):
    return ResultTable(columns, config_hash=cfg.hash(), seed=cfg.seed)


def _scalar_params(cfg):
    return cfg["env.A"], cfg["env.B"], cfg["env.s0"], cfg["env.sigma_r"], cfg["env.T"]


def reference_1d(A, B, theta_ref, s0, T):
    """States and actions of the true scalar system under ``a = theta_ref s``."""
    gain = A + B * theta_ref
    states = s0 * gain ** np.arange(T + 1)
    return states, theta_ref * states[:-1]


def gradient_cell(A, B, dA, dB, theta, theta_ref, s0, sigma_r, T):
    """``(g_true, g_model, g_opc)`` at one grid cell, or None if the model loop is unstable."""
    if not closed_loop_stable(A, dA, B, dB, theta):
        return None
    Am, Bm = A + dA, B + dB
    g_true = return_and_gradient_1d(A, B, theta, s0, sigma_r, T)[1]
    g_model = return_and_gradient_1d(Am, Bm, theta, s0, sigma_r, T)[1]
    ref = reference_1d(A, B, theta if theta_ref == "on-policy" else theta_ref, s0, T)
    g_opc = return_and_gradient_1d(Am, Bm, theta, s0, sigma_r, T, reference=ref)[1]
    return g_true, g_model, g_opc


def run_gradient_study(cfg):
    """Signed gradient distance of the raw and OPC models over (theta, dA) and (theta, dB)."""
    A, B, s0, sigma_r, T = _scalar_params(cfg)
    theta_ref = cfg["policy.theta_ref"]
    table = _table(cfg, ["sweep", "theta", "delta", "g_true", "g_model", "g_opc", "d_raw", "d_opc"])
    for sweep, key in (("A", "model.dA"), ("B", "model.dB")):
        for delta in cfg[key]:
            dA, dB = (delta, 0.0) if sweep == "A" else (0.0, delta)
            for theta in cfg["policy.theta"]:
                cell = gradient_cell(A, B, dA, dB, theta, theta_ref, s0, sigma_r, T)
                if cell is None:
                    table.append(sweep, theta, delta, None, None, None, None, None)
                    continue
                g_true, g_model, g_opc = cell
                table.append(
                    sweep, theta, delta, g_true, g_model, g_opc,
                    signed_gradient_distance(g_true, g_model), signed_gradient_distance(g_true, g_opc),
                )
    return table


def run_landscape(cfg):
    """Mean return of the true system, the biased model and OPC over a theta grid."""
    A, B, s0, sigma_r, T = _scalar_params(cfg)
    dA, dB = cfg["model.dA"], cfg["model.dB"]
    ref = reference_1d(A, B, cfg["policy.theta_ref"], s0, T)
    table = _table(cfg, ["theta", "return_true", "return_model", "return_opc"])
    for theta in cfg["policy.theta"]:
        table.append(
            theta,
            return_and_gradient_1d(A, B, theta, s0, sigma_r, T)[0],
            return_and_gradient_1d(A + dA, B + dB, theta, s0, sigma_r, T)[0],
            return_and_gradient_1d(A + dA, B + dB, theta, s0, sigma_r, T, reference=ref)[0],
        )
    return table


def _di_setup(cfg):
    env = double_integrator(cfg["env.dt"], cfg["env.noise_var"], T=cfg["env.T"], sigma_r=cfg["env.sigma_r"])
    model = LearnedLinearModel(env.A, env.B, dA=cfg["model.dA"] * np.eye(env.n_s), noise_cov=env.noise_cov)
    theta = np.asarray(cfg["policy.theta"], dtype=float).reshape(1, env.n_s)
    return env, model, theta


def _shared_references(cfg, name, env, policy, n):
    """Reference rollouts plus the process and action noise that produced them."""
    rng = make_rng(cfg.seed, name, "references")
    W = env.sample_noise((n, env.T), rng)
    E = policy.noise((n, env.T), rng)
    return batch_env_rollouts(env, policy, n, rng, noise=W, eps=E), W, E


def run_state_dist(cfg):
    """Per-dimension W1 between environment, plain-model and OPC state clouds."""
    env, model, theta = _di_setup(cfg)
    n = cfg["study.samples"]
    ref_policy = GaussianLinearPolicy(theta, [[cfg["policy.sigma"]]], cfg["policy.beta_ref"])
    refs, W, E = _shared_references(cfg, "state-dist", env, ref_policy, n)
    table = _table(cfg, ["beta", "t", "dim", "w1_env_vs_model", "w1_env_vs_opc"])
    for k, beta in enumerate(cfg["policy.beta"]):
        q = ref_policy.with_beta(beta)
        rng = make_rng(cfg.seed, "state-dist", k)
        env_cloud = batch_env_rollouts(env, q, n, rng, noise=W, eps=E).states
        opc_cloud = batch_opc_rollouts(model, refs, q, rng, env.reward).states
        model_cloud = batch_model_rollouts(model, q, refs.states[:, 0], env.T, rng, env.reward).states
        for t in range(env.T + 1):
            for dim in range(env.n_s):
                table.append(
                    beta, t, dim,
                    wasserstein1_empirical(env_cloud[:, t, dim], model_cloud[:, t, dim]),
                    wasserstein1_empirical(env_cloud[:, t, dim], opc_cloud[:, t, dim]),
                )
    return table


def run_off_policy(cfg):
    """OPC-predicted vs environment return as the behaviour noise multiplier grows."""
    env, model, theta = _di_setup(cfg)
    n = cfg["study.samples"]
    ref_policy = GaussianLinearPolicy(theta, [[cfg["policy.sigma"]]], cfg["policy.beta_ref"])
    refs, W, E = _shared_references(cfg, "off-policy", env, ref_policy, n)
    table = _table(cfg, ["beta", "return_opc_predicted", "return_env", "return_env_exact", "abs_error"])
    for k, beta in enumerate(cfg["policy.beta"]):
        q = ref_policy.with_beta(beta)
        rng = make_rng(cfg.seed, "off-policy", k)
        eta_env = float(np.mean(batch_env_rollouts(env, q, n, rng, noise=W, eps=E).returns()))
        eta_opc = float(np.mean(batch_opc_rollouts(model, refs, q, rng, env.reward).returns()))
        table.append(beta, eta_opc, eta_env, expected_return(env, q), abs(eta_opc - eta_env))
    return table


def run_lemma1(cfg):
    """Error of OPC return estimates from B references, deterministic policy."""
    env, model, theta = _di_setup(cfg)
    policy = LinearPolicy(theta)
    eta = expected_return(env, policy)
    rows = lemma1_convergence_study(
        env, model, policy, cfg["study.B_grid"], cfg["study.trials"], make_rng(cfg.seed, "lemma1"), eta=eta
    )
    table = _table(cfg, ["B", "mean_abs_error", "tail_prob", "estimate_variance", "eps", "eta"])
    for row in rows:
        table.append(*row, eta)
    return table


def random_bound_config(rng, T_max, gamma, sigma_r, model_error, beta):
    """One random linear-Gaussian env, perturbed linear model and Gaussian-linear policy."""
    n_s = int(rng.integers(1, 4))
    n_a = int(rng.integers(1, 3))
    T = int(rng.integers(1, T_max + 1))
    A = rng.normal(size=(n_s, n_s))
    A *= rng.uniform(0.3, 0.9) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    B = 0.5 * rng.normal(size=(n_s, n_a))
    G = rng.normal(size=(n_s, n_s))
    noise_cov = 0.01 * G @ G.T
    env = LinearGaussianEnv(
        A, B, noise_cov, rng.normal(size=n_s), T, gamma=gamma, reward=RewardSpec("bell", sigma_r)
    )
    model = LearnedLinearModel(
        A, B, dA=model_error * rng.normal(size=(n_s, n_s)), dB=model_error * rng.normal(size=(n_s, n_a))
    )
    H = rng.normal(size=(n_a, n_a))
    policy = GaussianLinearPolicy(0.3 * rng.normal(size=(n_a, n_s)), 0.1 * (H @ H.T + 0.1 * np.eye(n_a)), beta)
    return env, model, policy


def run_bound_check(cfg):
    """Monte Carlo generalized-OPC error against the Lipschitz bound on the return gap."""
    betas = cfg["policy.beta"]
    table = _table(cfg, ["config", "n_s", "n_a", "T", "beta", "lhs", "rhs", "holds"])
    for k in range(cfg["study.configs"]):
        rng = make_rng(cfg.seed, "bound-check", k)
        env, model, policy = random_bound_config(
            rng, cfg["study.T_max"], cfg["study.gamma"], cfg["study.sigma_r"], cfg["study.model_error"],
            betas[k % len(betas)],
        )
        lhs, rhs, _ = theorem1_check(env, model, policy, cfg["study.rollouts"], rng)
        table.append(k, env.n_s, env.n_a, env.T, policy.beta, lhs, rhs, lhs <= rhs)
    return table


def ilc_equivalence_instance(rng, n_perturbations, max_ns=3, max_na=3, max_T=8):
    """``(lifted, rel_dev, beaten)`` for one random instance.

    ``beaten`` counts random perturbations of the NO-ILC step that do not
    lower the regularized objective.
    """
    lifted, u, s, r_bar, C_pi = random_instance(rng, max_ns, max_na, max_T)
    weights = IlcWeights(np.eye(s.size), C_pi)
    e = r_bar - s
    u_ilc = noilc_update(u, e, lifted, weights)
    u_mbrl = mbrl_closed_form(r_bar, s, u, lifted, C_pi)
    rel = np.linalg.norm(u_ilc - u_mbrl) / max(np.linalg.norm(u_ilc), 1e-300)
    du = u_ilc - u
    best = ilc_objective(e, lifted, du, weights)
    beaten = 0
    for _ in range(n_perturbations):
        delta = rng.normal(size=du.size) * 10.0 ** rng.uniform(-6, 0)
        beaten += ilc_objective(e, lifted, du + delta, weights) >= best
    return lifted, float(rel), int(beaten)


def run_ilc_equiv(cfg):
    """NO-ILC with M = I, W = C_pi against the reduced MBRL closed form."""
    n_pert = cfg["study.perturbations"]
    table = _table(cfg, ["instance", "n_s", "n_a", "T", "rel_dev", "perturbations_beaten", "perturbations"])
    worst, total = 0.0, 0
    for k in range(cfg["study.instances"]):
        rng = make_rng(cfg.seed, "ilc-equiv", k)
        lifted, rel, beaten = ilc_equivalence_instance(
            rng, n_pert, cfg["study.max_ns"], cfg["study.max_na"], cfg["study.max_T"]
        )
        worst = max(worst, rel)
        total += beaten
        table.append(k, lifted.n_s, lifted.n_a, lifted.T, rel, beaten, n_pert)
    table.append("max", None, None, None, worst, total, n_pert * cfg["study.instances"])
    return table


def run_mbrl_loop(cfg):
    """The MBRL loop on the scalar system with an OPC model and with the plain biased model."""
    A, B, s0, sigma_r, T = _scalar_params(cfg)
    env = scalar_env(A, B, s0, T, sigma_r)
    dA, dB = cfg["model.dA"], cfg["model.dB"]
    improver = default_improver(cfg["study.alpha"], cfg["study.steps"], cfg["study.eps_pi"])
    targets = {"opc": -A / B, "learned": -(A + dA) / (B + dB)}
    table = _table(cfg, ["loop", "iteration", "theta", "return_true", "flagged", "target"])
    for kind in ("opc", "learned"):
        mcfg = MbrlConfig(
            kind=kind, dA=dA, dB=dB, horizon=cfg["study.H"], budget=cfg["study.N"], retain=cfg["study.K"]
        )
        res = mbrl_loop(
            env, mcfg, LinearPolicy([[cfg["policy.theta0"]]]), cfg["study.iterations"], improver,
            make_rng(cfg.seed, "mbrl-loop", kind),
        )
        for n, (th, ret, flag) in enumerate(zip(res.thetas, res.returns, res.flagged)):
            table.append(kind, n, float(th[0, 0]), ret, flag, targets[kind])
    return table


STUDIES = {
    "gradient": run_gradient_study,
    "landscape": run_landscape,
    "state-dist": run_state_dist,
    "off-policy": run_off_policy,
    "lemma1": run_lemma1,
    "bound-check": run_bound_check,
    "ilc-equiv": run_ilc_equiv,
    "mbrl-loop": run_mbrl_loop,
}


def run_study(cfg):
    return STUDIES[cfg.subcommand](cfg)
