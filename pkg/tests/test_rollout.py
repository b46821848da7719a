import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from opclab import ConfigError, ContractError, Trajectory, make_rng, rollout_env, scalar_env
from opclab.buffer import ReplayBuffer
from opclab.env import double_integrator, expected_return
from opclab.models import LearnedLinearModel, OpcModel, ReplayModel
from opclab.policy import GaussianLinearPolicy, LinearPolicy
from opclab.rollout import (
    BranchedRolloutConfig,
    MbrlConfig,
    batch_env_rollouts,
    batch_opc_rollouts,
    branch_objective,
    branched_rollouts,
    default_improver,
    make_predictor,
    mbrl_loop,
    model_rollout,
    simulate_branch,
)


def _noisy_buffer(B=2, T=20, seed=0):
    env = scalar_env(noise_var=0.01, T=T)
    rng = make_rng(seed)
    return env, ReplayBuffer(rollout_env(env, LinearPolicy([[-0.5]]), rng, index=b + 1) for b in range(B))


def test_budget_examples():
    env, buf = _noisy_buffer()
    model = LearnedLinearModel(env.A, env.B)
    sim = branched_rollouts(model, buf, LinearPolicy([[-0.5]]), BranchedRolloutConfig(5, 10, "learned"), make_rng(1), env=env)
    assert [n for _, _, n in sim.branches()] == [5, 5]
    sim = branched_rollouts(model, buf, LinearPolicy([[-0.5]]), BranchedRolloutConfig(5, 12, "opc"), make_rng(1), env=env)
    assert len(sim) == 12 and [n for _, _, n in sim.branches()] == [5, 5, 2]


def test_terminal_reference_stops_opc_branch():
    states = np.array([[0.0], [0.1], [0.2], [50.0]])
    traj = Trajectory.from_arrays(states, np.zeros((3, 1)), terminals=[False, False, True])
    model = LearnedLinearModel([[1.0]], [[1.0]])
    env = scalar_env()
    predict = make_predictor(model, "opc", env, make_rng(0))
    out = simulate_branch(predict, "opc", traj, 2, 5, LinearPolicy([[0.0]]), make_rng(0), env.reward, env.is_terminal)
    assert len(out) == 1


def test_simulated_terminal_stops_branch():
    env = scalar_env()
    buf = ReplayBuffer([Trajectory.from_arrays(np.ones((11, 1)), np.zeros((10, 1)))])
    model = LearnedLinearModel([[3.0]], [[0.0]])
    sim = branched_rollouts(model, buf, LinearPolicy([[0.0]]), BranchedRolloutConfig(5, 8, "learned"),
                            make_rng(0), env=env, is_terminal=lambda s: bool(abs(s[0]) > 5))
    # 1 -> 3 -> 9 is terminal after two steps
    assert all(n == 2 for _, _, n in sim.branches())
    assert sim.transitions[1].terminal


def test_branch_errors():
    env, buf = _noisy_buffer(T=4)
    policy = LinearPolicy([[-0.5]])
    with pytest.raises(ConfigError):
        branched_rollouts(LearnedLinearModel(env.A, env.B), buf, policy, BranchedRolloutConfig(5, 10), make_rng(0), env=env)
    with pytest.raises(ContractError):
        branched_rollouts(LearnedLinearModel(env.A, env.B), ReplayBuffer(), policy, BranchedRolloutConfig(2, 10), make_rng(0), env=env)
    with pytest.raises(ConfigError):
        BranchedRolloutConfig(0, 10)
    with pytest.raises(ConfigError):
        BranchedRolloutConfig(2, 10, "mystery")


@given(st.integers(1, 8), st.integers(1, 60), st.sampled_from(["opc", "learned", "replay"]), st.integers(0, 50))
def test_budget_and_provenance(H, N, kind, seed):
    env, buf = _noisy_buffer(B=3, T=10, seed=seed)
    policy = GaussianLinearPolicy([[-0.5]], [[0.05]])
    model = LearnedLinearModel(env.A, env.B, dA=0.2, noise_cov=env.noise_cov)
    sim = branched_rollouts(model, buf, policy, BranchedRolloutConfig(H, N, kind), make_rng(seed), env=env)
    lengths = [n for _, _, n in sim.branches()]
    assert len(sim) == N
    assert sum(lengths[:-1]) < N
    for tr in sim:
        ref = buf[tr.ref_b]
        assert tr.ref_t + tr.step < len(ref)
        assert tr.ref_index == ref.index


def test_determinism():
    env, buf = _noisy_buffer()
    policy = GaussianLinearPolicy([[-0.5]], [[0.05]])
    model = LearnedLinearModel(env.A, env.B, dA=0.2)
    cfg = BranchedRolloutConfig(5, 40, "opc")
    a = branched_rollouts(model, buf, policy, cfg, make_rng(9), env=env).to_csv()
    b = branched_rollouts(model, buf, policy, cfg, make_rng(9), env=env).to_csv()
    assert a == b
    assert a.splitlines()[0].startswith("branch,ref_b,ref_t,step,iteration,b,t,s0,a0,s_next0")


def test_learned_branching_matches_direct_implementation():
    env, buf = _noisy_buffer(B=3)
    policy = GaussianLinearPolicy([[-0.5]], [[0.05]])
    model = LearnedLinearModel(env.A, env.B, dA=0.2, noise_cov=[[0.02]])
    H, N = 4, 30
    sim = branched_rollouts(model, buf, policy, BranchedRolloutConfig(H, N, "learned"), make_rng(11), env=env)

    rng = make_rng(11)
    direct = []
    while len(direct) < N:
        traj = buf[int(rng.integers(len(buf)))]
        t0 = int(rng.integers(0, len(traj) - H + 1))
        s = traj.states[t0]
        for h in range(H):
            a = policy.act(s, rng)
            s1 = model.sample(s, a, rng, t0 + h)
            direct.append((s, a, s1))
            s = s1
    direct = direct[:N]
    for tr, (s, a, s1) in zip(sim, direct):
        assert np.array_equal(tr.state, s) and np.array_equal(tr.action, a) and np.array_equal(tr.next_state, s1)


def test_model_rollout_examples():
    env = double_integrator()
    policy = GaussianLinearPolicy([[-1.0, -1.5]], [[0.25]])
    traj = rollout_env(env, policy, make_rng(0))
    buf = ReplayBuffer([traj])
    seg = model_rollout(ReplayModel(buf), None, traj.states[3], 6, actions=traj.actions[3:9], reference=0, t0=3)
    np.testing.assert_array_equal(seg.states, traj.states[3:10])

    det_env = scalar_env()
    det = rollout_env(det_env, LinearPolicy([[-0.3]]))
    opc = OpcModel(LearnedLinearModel(det_env.A, det_env.B, dA=0.5), det)
    seg = model_rollout(opc, LinearPolicy([[-0.3]]), det.states[0], 10, reference=0)
    np.testing.assert_array_equal(seg.states, det.states[:11])

    learned = LearnedLinearModel([[1.0]], [[1.0]], dA=0.5, dB=-0.2)
    seg = model_rollout(learned, LinearPolicy([[-0.9]]), np.array([1.0]), 8)
    np.testing.assert_allclose(seg.states[:, 0], (1.5 - 0.8 * 0.9) ** np.arange(9), rtol=1e-12)


def test_model_rollout_out_of_data_stops_early():
    det_env = scalar_env(T=5)
    det = rollout_env(det_env, LinearPolicy([[-0.3]]))
    seg = model_rollout(ReplayModel(det), LinearPolicy([[-0.3]]), det.states[2], 10, reference=0, t0=2)
    assert len(seg) == 3


def test_batch_opc_reproduces_references_on_policy():
    env = double_integrator()
    policy = LinearPolicy([[-1.0, -1.5]])
    refs = batch_env_rollouts(env, policy, 50, make_rng(0))
    sim = batch_opc_rollouts(LearnedLinearModel(env.A + 0.1, env.B), refs, policy, make_rng(1), env.reward)
    assert np.array_equal(sim.states, refs.states)


def test_replay_return_converges_to_env_return():
    env = double_integrator()
    policy = GaussianLinearPolicy([[-1.0, -1.5]], [[0.25]])
    refs = batch_env_rollouts(env, policy, 20_000, make_rng(2))
    est = refs.returns()
    se = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - expected_return(env, policy)) <= 3 * se


def test_branch_objective_matches_simulation():
    env, buf = _noisy_buffer()
    model = LearnedLinearModel(env.A, env.B, dA=0.3)
    policy = LinearPolicy([[-0.6]])
    sim = branched_rollouts(model, buf, policy, BranchedRolloutConfig(5, 20, "opc"), make_rng(3), env=env)
    obj = branch_objective(model, buf, sim, "opc", env.reward, env)
    assert obj(policy.theta) == pytest.approx(np.mean([tr.reward for tr in sim]), rel=1e-12)


def test_mbrl_env_and_exact_model_curves_coincide():
    env = scalar_env()
    runs = [
        mbrl_loop(env, MbrlConfig(kind=kind), LinearPolicy([[-0.2]]), 6, default_improver(), make_rng(4))
        for kind in ("env", "learned")
    ]
    assert runs[0].returns == runs[1].returns
    assert all(np.array_equal(x, y) for x, y in zip(runs[0].thetas, runs[1].thetas))


def test_mbrl_divergence_flagged_and_reverted():
    env = scalar_env()

    def wild(policy, objective):
        return policy.with_theta([[50.0]])

    res = mbrl_loop(env, MbrlConfig(kind="learned"), LinearPolicy([[-0.5]]), 3, wild, make_rng(0))
    assert res.flagged == [False, True, False]
    assert res.thetas[2][0, 0] == -0.5


def test_rollout_indices_are_one_based():
    env = scalar_env(noise_var=0.01, T=5)
    buf = batch_env_rollouts(env, LinearPolicy([[-0.5]]), 3, make_rng(0)).to_buffer(iteration=2)
    assert [(tr.iteration, tr.index) for tr in buf] == [(2, 1), (2, 2), (2, 3)]
