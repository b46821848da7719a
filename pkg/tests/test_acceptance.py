"""Exit criteria of the build, each at its stated tolerance and time budget.

Every test prints one ``criterion N: PASS/FAIL`` line (also collected in
the terminal summary) before asserting.
"""

import time

import numpy as np
import pytest

from opclab import make_rng, rollout_env
from opclab.analysis import (
    improvement_report,
    loglog_slope,
    signed_gradient_distance,
    wasserstein1_empirical,
)
from opclab.buffer import ReplayBuffer
from opclab.config import default_config
from opclab.env import LinearGaussianEnv, RewardSpec, closed_loop_stable
from opclab.models import EnsembleModel, LearnedLinearModel, OpcModel, TimeOffsetModel, fit_least_squares
from opclab.policy import GaussianLinearPolicy, return_and_gradient_1d
from opclab.rollout import model_rollout
from opclab.studies import run_study

pytestmark = pytest.mark.acceptance


def _random_case(rng):
    n_s, n_a, T = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 40))
    A = rng.normal(size=(n_s, n_s))
    A *= rng.uniform(0.5, 1.1) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    B = rng.normal(size=(n_s, n_a))
    G = rng.normal(size=(n_s, n_s))
    env = LinearGaussianEnv(A, B, 0.05 * G @ G.T, rng.normal(size=n_s), T, reward=RewardSpec("bell", 1.0))
    kind = int(rng.integers(3))
    dA, dB = rng.normal(size=(n_s, n_s)), rng.normal(size=(n_s, n_a))
    if kind == 0:
        inner = LearnedLinearModel(A, B, d=rng.normal(size=n_s), dA=dA, dB=dB)
    elif kind == 1:
        inner = TimeOffsetModel(A + dA, B + dB, rng.normal(size=(T, n_s)))
    else:
        inner = EnsembleModel(tuple(LearnedLinearModel(A, B, dA=rng.normal(size=(n_s, n_s))) for _ in range(3)))
    H = rng.normal(size=(n_a, n_a))
    policy = GaussianLinearPolicy(rng.normal(size=(n_a, n_s)), H @ H.T + 0.1 * np.eye(n_a))
    return env, inner, policy


def test_criterion_1_on_policy_exactness(criterion):
    start = time.perf_counter()
    worst = 0.0
    for k in range(100):
        rng = make_rng(101, k)
        env, inner, policy = _random_case(rng)
        traj = rollout_env(env, policy, rng)
        sim = model_rollout(OpcModel(inner, ReplayBuffer([traj])), None, traj.states[0], len(traj),
                            actions=traj.actions, reference=0)
        assert len(sim) == len(traj)
        worst = max(worst, float(np.abs(sim.states - traj.states).max()))
    seconds = time.perf_counter() - start
    ok = worst <= 1e-12 and seconds < 1.0
    criterion(1, ok, f"max deviation {worst:.3g} over 100 cases", seconds)
    assert ok


def test_criterion_2_ilc_equivalence(criterion):
    start = time.perf_counter()
    table = run_study(default_config("ilc-equiv", seed=0))
    seconds = time.perf_counter() - start
    summary = table.rows[-1]
    rel, beaten, total = summary[4], summary[5], summary[6]
    ok = len(table.rows) == 51 and rel < 1e-8 and beaten == total == 5000 and seconds < 5.0
    criterion(2, ok, f"max relative deviation {rel:.3g}; {beaten}/{total} perturbations beaten", seconds)
    assert ok


def test_criterion_3_gradient_sign_study(criterion):
    start = time.perf_counter()
    cfg = default_config("gradient", seed=0)
    table = run_study(cfg)
    seconds = time.perf_counter() - start
    sweep = np.array(table.column("sweep"))
    theta, delta = table.array("theta"), table.array("delta")
    d_raw, d_opc = table.array("d_raw"), table.array("d_opc")
    stable = ~np.isnan(d_opc)
    fractions, ok = {}, seconds < 30.0
    for name in ("A", "B"):
        m = stable & (sweep == name)
        raw, opc = float(np.mean(d_raw[m] >= 0)), float(np.mean(d_opc[m] >= 0))
        fractions[name] = (raw, opc)
        ok &= opc > raw
    on_zero = float(np.abs(d_opc[stable & (delta == 0)]).max())
    on_ref = float(np.abs(d_opc[stable & (theta == cfg["policy.theta_ref"])]).max())
    ok &= on_zero <= 1e-10 and on_ref <= 1e-10
    detail = (f"sign-correct fraction raw/opc dA {fractions['A'][0]:.3f}/{fractions['A'][1]:.3f}, "
              f"dB {fractions['B'][0]:.3f}/{fractions['B'][1]:.3f}; max |d_opc| at delta=0 {on_zero:.2g}, "
              f"at theta_ref {on_ref:.2g}")
    criterion(3, ok, detail, seconds)
    assert ok


def test_criterion_4_theorem1_bound(criterion):
    start = time.perf_counter()
    table = run_study(default_config("bound-check", seed=0))
    seconds = time.perf_counter() - start
    beta, lhs, rhs, T = table.array("beta"), table.array("lhs"), table.array("rhs"), table.array("T")
    zero = beta == 0
    ok = (len(lhs) == 20 and T.max() <= 6 and bool(np.all(lhs <= rhs)) and zero.any()
          and bool(np.all(np.abs(lhs[zero]) <= 1e-12)) and seconds < 60.0)
    slack = float(np.min((rhs - lhs)[~zero])) if (~zero).any() else float("nan")
    criterion(4, ok, f"{int(np.sum(lhs <= rhs))}/20 bounds hold; beta=0 max lhs {np.abs(lhs[zero]).max():.2g}; "
                     f"min slack {slack:.3g}", seconds)
    assert ok


def test_criterion_5_lemma1_convergence(criterion):
    start = time.perf_counter()
    cfg = default_config("lemma1", seed=0)
    table = run_study(cfg)
    seconds = time.perf_counter() - start
    B, err, var = table.array("B"), table.array("mean_abs_error"), table.array("estimate_variance")
    slope = loglog_slope(B, var)
    ok = (list(B) == [4, 16, 64, 256] and cfg["study.trials"] == 200 and bool(np.all(np.diff(err) < 0))
          and -1.3 <= slope <= -0.7 and seconds < 60.0)
    criterion(5, ok, f"mean errors {np.array2string(err, precision=4)}; variance slope {slope:.3f}", seconds)
    assert ok


def test_criterion_6_state_distribution(criterion):
    start = time.perf_counter()
    cfg = default_config("state-dist", seed=0)
    table = run_study(cfg)
    seconds = time.perf_counter() - start
    beta, dim = table.array("beta"), table.array("dim")
    w_model, w_opc = table.array("w1_env_vs_model"), table.array("w1_env_vs_opc")
    ok = cfg["env.T"] == 30 and cfg["study.samples"] == 2000 and cfg["model.dA"] == 0.05 and seconds < 30.0
    parts = []
    for b in (1.0, 1.5):
        for d in (0, 1):
            m = (beta == b) & (dim == d)
            mo, mm = w_opc[m].mean(), w_model[m].mean()
            ok &= bool(mo < mm)
            parts.append(f"beta={b} dim{d} opc/model {mo:.4f}/{mm:.4f}")
    criterion(6, ok, "; ".join(parts), seconds)
    assert ok


def biased_optimum_oracle(A, B, dA, dB, s0, sigma_r, T):
    """Grid search of the plain model's return, refined once around the best cell."""
    grid = np.linspace(-3.0, 0.0, 3001)
    best = max((t for t in grid if closed_loop_stable(A, dA, B, dB, t)),
               key=lambda t: return_and_gradient_1d(A + dA, B + dB, t, s0, sigma_r, T)[0])
    fine = np.linspace(best - 1e-3, best + 1e-3, 2001)
    return float(max((t for t in fine if closed_loop_stable(A, dA, B, dB, t)),
                     key=lambda t: return_and_gradient_1d(A + dA, B + dB, t, s0, sigma_r, T)[0]))


def test_criterion_7_mbrl_loop(criterion):
    start = time.perf_counter()
    cfg = default_config("mbrl-loop", seed=0)
    table = run_study(cfg)
    seconds = time.perf_counter() - start
    loop, theta = np.array(table.column("loop")), table.array("theta")
    opc, plain = theta[loop == "opc"], theta[loop == "learned"]
    target = biased_optimum_oracle(cfg["env.A"], cfg["env.B"], cfg["model.dA"], cfg["model.dB"],
                                   cfg["env.s0"], cfg["env.sigma_r"], cfg["env.T"])
    opc_err, plain_err = abs(opc[-1] + 1.0), abs(plain[-1] - target)
    ok = (cfg["study.iterations"] == 30 and cfg["policy.theta0"] == -0.2 and cfg["model.dA"] == 0.5
          and opc_err < 0.1 and plain_err < 0.05 and seconds < 60.0)
    criterion(7, ok, f"opc final theta {opc[-1]:.4f} (|err| {opc_err:.4f}); plain final theta {plain[-1]:.4f} "
                     f"vs grid optimum {target:.4f} (|err| {plain_err:.4f})", seconds)
    assert ok


def normal_equations(S, U, S1):
    X = np.hstack([S, U, np.ones((len(S), 1))])
    return np.linalg.solve(X.T @ X, X.T @ S1)


def test_criterion_8_identity_and_estimator_suites(criterion):
    start = time.perf_counter()
    rng = make_rng(808)
    recon = 0.0
    bound_ok = True
    for _ in range(1000):
        vals = rng.normal(scale=10.0 ** rng.uniform(-3, 3), size=4)
        r = improvement_report(*vals)
        recon = max(recon, abs(r.reconstruct() - r.true_improvement))
        bound_ok &= r.true_improvement >= r.lower_bound - 1e-12 * (1 + abs(r.true_improvement))

    cases = [((2.5, 2.5), 0.0), ((1.0, -1.0), -0.5), ((0.0, 1.0), 0.25), ((-1.0, 0.0), -0.25)]
    sgd = max(abs(signed_gradient_distance(*g) - want) for g, want in cases)

    w1_ok = True
    for _ in range(100):
        n = int(rng.integers(1, 60))
        x, y, z = (rng.normal(rng.normal(), rng.uniform(0.1, 3), size=n) for _ in range(3))
        dxy = wasserstein1_empirical(x, y)
        w1_ok &= dxy >= 0 and dxy == wasserstein1_empirical(y, x) and wasserstein1_empirical(x, x) == 0.0
        w1_ok &= wasserstein1_empirical(x, z) <= dxy + wasserstein1_empirical(y, z) + 1e-12

    fit = 0.0
    for _ in range(20):
        n_s, n_a, n = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(20, 500))
        S, U = rng.normal(size=(n, n_s)), rng.normal(size=(n, n_a))
        S1 = S @ rng.normal(size=(n_s, n_s)) + U @ rng.normal(size=(n_a, n_s)) + 0.1 * rng.normal(size=(n, n_s))
        m = fit_least_squares((S, U, S1))
        fit = max(fit, float(np.abs(np.hstack([m.A, m.B, m.d[:, None]]) - normal_equations(S, U, S1).T).max()))
    seconds = time.perf_counter() - start
    ok = recon <= 1e-12 and bound_ok and sgd <= 1e-12 and w1_ok and fit <= 1e-8 and seconds < 5.0
    criterion(8, ok, f"reconstruction {recon:.2g}; gradient-distance cases {sgd:.2g}; W1 metric checks "
                     f"{'ok' if w1_ok else 'violated'}; fit vs normal equations {fit:.2g}", seconds)
    assert ok
