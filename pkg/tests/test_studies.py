import numpy as np
import pytest

from opclab.config import parse_config
from opclab.policy import return_and_gradient_1d
from opclab.studies import gradient_cell, reference_1d, run_study


def cfg(sub, body="", seed=0):
    text = f"[study]\nsubcommand = {sub}\nseed = {seed}\n"
    if body.startswith("[study]\n"):
        body = body[len("[study]\n"):]
    return parse_config(text + body)


def test_reference_1d():
    s, a = reference_1d(1.0, 1.0, -0.5, 1.0, 4)
    np.testing.assert_array_equal(s, [1, 0.5, 0.25, 0.125, 0.0625])
    np.testing.assert_array_equal(a, -0.5 * s[:-1])


def test_gradient_cell_exact_model_and_reference():
    g = gradient_cell(1.0, 1.0, 0.0, 0.0, -0.7, -1.0, 1.0, 0.05, 60)
    assert g[0] == g[1] == g[2]
    g = gradient_cell(1.0, 1.0, 0.4, 0.0, -1.0, -1.0, 1.0, 0.05, 60)
    assert g[0] == g[2]
    assert gradient_cell(1.0, 1.0, 0.9, 0.0, -0.05, -1.0, 1.0, 0.05, 60) is None


def test_gradient_study_small_grid():
    t = run_study(cfg("gradient", "[policy]\ntheta = linspace(-1.6, -0.4, 13)\n[model]\n"
                      "dA = -0.5, 0.0, 0.5\ndB = -0.5, 0.0, 0.5\n"))
    delta, theta = t.array("delta"), t.array("theta")
    d_raw, d_opc = t.array("d_raw"), t.array("d_opc")
    zero = delta == 0
    assert np.all(d_raw[zero] == 0) and np.all(np.abs(d_opc[zero]) <= 1e-10)
    at_ref = np.isclose(theta, -1.0) & ~np.isnan(d_opc)
    assert at_ref.any() and np.all(np.abs(d_opc[at_ref]) <= 1e-10)
    assert np.all(np.abs(d_opc[~np.isnan(d_opc)]) <= 1) and np.isnan(d_raw).sum() == np.isnan(d_opc).sum()


def test_landscape_examples():
    t = run_study(cfg("landscape", "[model]\ndA = 0.5\ndB = 0.2\n[policy]\ntheta = linspace(-2, 0, 2001)\n"))
    theta, true, model, opc = (t.array(c) for c in ("theta", "return_true", "return_model", "return_opc"))
    k = int(np.argmin(np.abs(theta + 1.0)))
    assert opc[k] == true[k]
    assert theta[np.argmax(model)] == pytest.approx(-(1.5) / 1.2, abs=1e-3)
    t0 = run_study(cfg("landscape", "[model]\ndA = 0.0\n[policy]\ntheta = linspace(-2, 0, 41)\n"))
    assert np.array_equal(t0.array("return_true"), t0.array("return_model"))
    np.testing.assert_allclose(t0.array("return_opc"), t0.array("return_true"), rtol=0, atol=1e-15)


def test_state_dist_examples():
    t = run_study(cfg("state-dist", "[study]\nsamples = 200\n[env]\nT = 10\n"))
    t_col, beta = t.array("t"), t.array("beta")
    assert np.all(t.array("w1_env_vs_model")[t_col == 0] == 0)
    assert np.all(t.array("w1_env_vs_opc")[t_col == 0] == 0)
    m, o = t.array("w1_env_vs_model"), t.array("w1_env_vs_opc")
    for b in (1.0, 1.5):
        assert o[beta == b].mean() < m[beta == b].mean()
    det = run_study(cfg("state-dist", "[study]\nsamples = 100\n[env]\nT = 10\n[policy]\nbeta_ref = 0\nbeta = 0\n"))
    assert np.all(det.array("w1_env_vs_opc") == 0)
    assert det.array("w1_env_vs_model").max() > 0


def test_off_policy_examples():
    t = run_study(cfg("off-policy", "[study]\nsamples = 100\n[env]\nT = 10\n[policy]\nbeta_ref = 0\nbeta = 0\n"))
    assert t.array("abs_error")[0] == 0.0
    t = run_study(cfg("off-policy", "[study]\nsamples = 100\n[env]\nT = 10\nnoise_var = 0\n"
                      "[policy]\nsigma = 0\nbeta = 1\n"))
    assert t.array("abs_error")[0] == 0.0
    assert t.array("return_env")[0] == pytest.approx(t.array("return_env_exact")[0], abs=1e-12)


def test_lemma1_table():
    t = run_study(cfg("lemma1", "[study]\nB_grid = 4, 64\ntrials = 50\n"))
    err = t.array("mean_abs_error")
    assert err[1] < err[0]
    assert np.all(t.array("eps") == pytest.approx(0.05 * abs(t.array("eta")[0])))


def test_bound_check_beta_zero_rows():
    t = run_study(cfg("bound-check", "[study]\nconfigs = 6\nrollouts = 500\n"))
    beta, lhs, rhs = t.array("beta"), t.array("lhs"), t.array("rhs")
    assert np.all(lhs[beta == 0] == 0) and np.all(rhs[beta == 0] == 0)
    assert np.all(t.array("holds") == 1)


def test_ilc_equiv_table():
    t = run_study(cfg("ilc-equiv", "[study]\ninstances = 10\nperturbations = 20\n"))
    assert t.rows[-1][0] == "max" and t.rows[-1][4] < 1e-8
    assert t.rows[-1][5] == 200


def test_mbrl_loop_table_targets():
    t = run_study(cfg("mbrl-loop", "[study]\niterations = 3\n"))
    loops = t.column("loop")
    assert loops.count("opc") == loops.count("learned") == 3
    target = dict(zip(loops, t.array("target")))
    assert target == {"opc": -1.0, "learned": -1.5}
    th0 = t.array("theta")[t.array("iteration") == 0]
    assert np.all(th0 == -0.2)
    ret0 = t.array("return_true")[0]
    assert ret0 == pytest.approx(return_and_gradient_1d(1.0, 1.0, -0.2)[0])
