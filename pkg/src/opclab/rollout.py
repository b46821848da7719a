"""Model rollouts, branched rollouts with OPC, and the MBRL outer loop."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from opclab.buffer import ReplayBuffer, fmt_float, transition_header
from opclab.env import Trajectory, Transition, discounted_return, rollout_env
from opclab.errors import ConfigError, ContractError, OutOfDataError
from opclab.models import EnsembleModel, LearnedLinearModel, OpcModel, ReplayModel, fit_least_squares
from opclab.policy import improve_policy

MODEL_KINDS = ("opc", "learned", "replay", "env")


@dataclass(frozen=True)
class BranchedRolloutConfig:
    horizon: int
    budget: int
    kind: str = "opc"
    retain: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1", "horizon")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1", "budget")
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}", "kind")


@dataclass(frozen=True)
class SimTransition:
    branch: int
    ref_b: int
    ref_t: int
    step: int
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool
    ref_iteration: int = 0
    ref_index: int = 1


@dataclass
class SimBuffer:
    """Simulated transitions with the branch and reference they came from.

    ``ref_b`` is the reference's position in the buffer; ``ref_index`` is its
    rollout index ``b`` (1-based within an iteration) as written to CSV.
    """

    transitions: list = field(default_factory=list)

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    def branches(self):
        """``[(ref_b, ref_t, length), ...]`` in branch order."""
        out = {}
        for tr in self.transitions:
            b, t, n = out.get(tr.branch, (tr.ref_b, tr.ref_t, 0))
            out[tr.branch] = (b, t, n + 1)
        return [out[k] for k in sorted(out)]

    def to_csv(self, path=None):
        first = self.transitions[0]
        header = ["branch", "ref_b", "ref_t", "step"] + transition_header(len(first.state), len(first.action))
        buf = io.StringIO(newline="")
        w = csv.writer(buf)
        w.writerow(header)
        for tr in self.transitions:
            w.writerow(
                [tr.branch, tr.ref_b, tr.ref_t, tr.step, tr.ref_iteration, tr.ref_index, tr.ref_t + tr.step]
                + [fmt_float(x) for x in tr.state]
                + [fmt_float(x) for x in tr.action]
                + [fmt_float(x) for x in tr.next_state]
                + [fmt_float(tr.reward), int(tr.terminal)]
            )
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", newline="") as f:
            f.write(text)
        return None


def _never_terminal(s):
    return False


def _check_horizon(buffer, H):
    open_ended = [len(tr) for tr in buffer if not tr.terminated]
    if open_ended and H > min(open_ended):
        raise ConfigError(f"horizon H={H} exceeds the shortest reference trajectory ({min(open_ended)})", "horizon")


def make_predictor(model, kind, env, rng):
    """Return ``predict(s, a, traj, t) -> next state`` for one branch."""
    if kind == "opc":
        inner = model
        if isinstance(model, EnsembleModel):
            inner = model.members[int(rng.integers(len(model.members)))]

        def predict(s, a, traj, t):
            tr = traj.transitions[t]
            return tr.next_state + (inner.mean(s, a, t) - inner.mean(tr.state, tr.action, t))
        return predict
    if kind == "replay":
        return lambda s, a, traj, t: traj.transitions[t].next_state.copy()
    if kind == "learned":
        return lambda s, a, traj, t: model.sample(s, a, rng, t)
    if env is None:
        raise ConfigError("model kind 'env' needs the environment", "kind")
    return lambda s, a, traj, t: env.step(s, a, rng)


def branched_rollouts(model, buffer, policy, cfg, rng, reward=None, env=None, is_terminal=None):
    """Short branches from recorded states, until ``cfg.budget`` transitions exist.

    Each branch samples a reference trajectory ``b`` uniformly, a start time
    ``t ~ U{0, .., len_b - H}``, and rolls ``H`` steps with fresh policy
    actions. Under ``kind="opc"`` a branch also stops when the reference
    next state is terminal or the reference runs out. The final branch runs
    to completion and the buffer is then truncated to exactly ``budget``.
    """
    if len(buffer) == 0:
        raise ContractError("cannot branch from an empty buffer")
    H = cfg.horizon
    _check_horizon(buffer, H)
    if reward is None:
        reward = env.reward if env is not None else None
    if reward is None:
        raise ContractError("a reward function is needed to label simulated transitions")
    if is_terminal is None:
        is_terminal = env.is_terminal if env is not None else _never_terminal
    sim = SimBuffer()
    branch = 0
    while len(sim) < cfg.budget:
        b = int(rng.integers(len(buffer)))
        traj = buffer[b]
        t0 = int(rng.integers(0, max(len(traj) - H, 0) + 1))
        predict = make_predictor(model, cfg.kind, env, rng)
        sim.transitions.extend(
            simulate_branch(predict, cfg.kind, traj, t0, H, policy, rng, reward, is_terminal, branch, b)
        )
        branch += 1
    del sim.transitions[cfg.budget:]
    return sim


def simulate_branch(predict, kind, traj, t0, H, policy, rng, reward, is_terminal, branch=0, b=0):
    """Roll one branch of up to ``H`` steps from ``traj.states[t0]``.

    Replay and OPC branches end when the reference runs out; OPC branches
    also end after a step whose reference transition is terminal.
    """
    out = []
    s = traj.states[t0]
    for h in range(H):
        t = t0 + h
        if kind in ("opc", "replay") and t >= len(traj):
            break
        a = np.asarray(policy.act(s, rng), dtype=float)
        s_next = predict(s, a, traj, t)
        terminal = bool(is_terminal(s_next))
        out.append(
            SimTransition(branch, b, t0, h, s, a, s_next, float(reward(s, t)), terminal, traj.iteration, traj.index)
        )
        if terminal or (kind == "opc" and traj.transitions[t].terminal):
            break
        s = s_next
    return out


def model_rollout(model, policy, s0, H, rng=None, reference=None, actions=None, reward=None, t0=0):
    """Roll an ``H``-step trajectory through ``model``.

    ``model`` is a :class:`ReplayModel`, :class:`OpcModel` (both need
    ``reference=b``; the time index advances from ``t0``), or any model with
    ``sample``. ``actions`` replaces the policy with a fixed action sequence.
    Running past the reference data ends the trajectory early.
    """
    s = np.asarray(s0, dtype=float)
    out = []
    for h in range(H):
        t = t0 + h
        a = np.asarray(actions[h], dtype=float) if actions is not None else np.asarray(policy.act(s, rng), dtype=float)
        try:
            if isinstance(model, ReplayModel):
                s_next = model.step(t, reference)
            elif isinstance(model, OpcModel):
                s_next = model.step(s, a, t, reference)
            else:
                s_next = model.sample(s, a, rng, t)
        except OutOfDataError:
            break
        r = float(reward(s, t)) if reward is not None else 0.0
        out.append(Transition(h, s, a, s_next, r, False))
        s = s_next
    return Trajectory(out, 0, 1 if reference is None else reference + 1)


def _padded_references(buffer):
    L = max(len(tr) for tr in buffer)
    n_s = buffer[0].states.shape[1]
    n_a = buffer[0].actions.shape[1]
    S = np.zeros((len(buffer), L + 1, n_s))
    U = np.zeros((len(buffer), L, n_a))
    for k, tr in enumerate(buffer):
        n = len(tr)
        S[k, : n + 1] = tr.states
        S[k, n + 1:] = tr.states[-1]
        U[k, :n] = tr.actions
    return S, U


def branch_objective(model, buffer, sim, kind, reward, env=None):
    """``theta -> mean reward`` over re-simulated branches of ``sim``.

    Every branch of ``sim`` is replayed from its recorded start with the
    deterministic policy ``a = theta s`` and the model's mean prediction, for
    the same number of steps as originally simulated. This is the surrogate
    return the improver ascends.
    """
    branches = sim.branches()
    b_idx = np.array([b for b, _, _ in branches])
    t_idx = np.array([t for _, t, _ in branches])
    lengths = np.array([n for _, _, n in branches])
    S_ref, U_ref = _padded_references(buffer)
    last = U_ref.shape[1] - 1
    total = lengths.sum()
    H = lengths.max()

    def objective(theta):
        theta = np.atleast_2d(theta)
        s = S_ref[b_idx, t_idx]
        acc = 0.0
        for h in range(H):
            active = h < lengths
            tt = np.minimum(t_idx + h, last)
            r = reward(s, tt)
            acc += np.sum(np.where(active, r, 0.0))
            a = s @ theta.T
            if kind == "opc":
                ref_s, ref_a = S_ref[b_idx, tt], U_ref[b_idx, tt]
                s = S_ref[b_idx, tt + 1] + (model.mean(s, a, tt) - model.mean(ref_s, ref_a, tt))
            elif kind == "replay":
                s = S_ref[b_idx, tt + 1]
            elif kind == "learned":
                s = model.mean(s, a, tt)
            else:
                s = env.mean_step(s, a)
        return acc / total

    return objective


@dataclass(frozen=True)
class MbrlConfig:
    """Settings of the outer MBRL loop.

    ``fit="true"`` uses the environment's own matrices as the learned model
    (plus the injected ``dA``/``dB``); ``fit="lstsq"`` refits on the retained
    buffer every iteration.
    """

    kind: str = "opc"
    fit: str = "true"
    dA: float | np.ndarray = 0.0
    dB: float | np.ndarray = 0.0
    rollouts: int = 1
    horizon: int = 20
    budget: int = 400
    retain: int = 1
    averaging: str = "mean"
    ridge: float = 0.0
    overflow: float = 1e6

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}", "kind")
        if self.fit not in ("true", "lstsq"):
            raise ConfigError("fit must be 'true' or 'lstsq'", "fit")


@dataclass
class MbrlResult:
    thetas: list
    returns: list
    flagged: list


def default_improver(step_size=0.5, steps=5, eps_pi=0.04, h=1e-5):
    def improver(policy, objective):
        return improve_policy(policy, objective, step_size=step_size, steps=steps, eps_pi=eps_pi, h=h)
    return improver


def mbrl_loop(env, cfg, policy0, iterations, improver, rng):
    """General MBRL: roll on env, (re)build the model, branch, improve.

    Returns the policy parameter and the true (environment) return of the
    policy rolled out at each iteration. A rollout whose state norm exceeds
    ``cfg.overflow`` flags the iteration and reverts to the previous policy.
    """
    policy = policy0
    prev = policy0
    buffer = ReplayBuffer()
    thetas, returns, flagged = [], [], []
    for n in range(iterations):
        trajs = [rollout_env(env, policy, rng, iteration=n, index=b + 1) for b in range(cfg.rollouts)]
        diverged = any(
            not np.all(np.isfinite(tr.states)) or np.abs(tr.states).max() > cfg.overflow for tr in trajs
        )
        thetas.append(policy.theta.copy())
        returns.append(float(np.mean([discounted_return(tr, env.gamma, cfg.averaging) for tr in trajs])))
        flagged.append(diverged)
        if diverged:
            policy = prev
            continue
        buffer = buffer.add(trajs).retain(n, cfg.retain)
        if cfg.fit == "lstsq":
            model = fit_least_squares(buffer, ridge=cfg.ridge).with_error(cfg.dA, cfg.dB)
        else:
            model = LearnedLinearModel(env.A, env.B, dA=cfg.dA, dB=cfg.dB)
        bcfg = BranchedRolloutConfig(cfg.horizon, cfg.budget, cfg.kind)
        sim = branched_rollouts(model, buffer, policy, bcfg, rng, env=env)
        objective = branch_objective(model, buffer, sim, cfg.kind, env.reward, env)
        prev = policy
        policy = improver(policy, objective)
    return MbrlResult(thetas, returns, flagged)


# --- batched rollouts for Monte Carlo studies ---------------------------------


@dataclass
class RolloutBatch:
    """``n`` trajectories of equal length stored as arrays.

    ``states`` is ``(n, T + 1, n_s)``, ``actions`` ``(n, T, n_a)`` and
    ``rewards`` ``(n, T)``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def returns(self, gamma=1.0, averaging="sum"):
        return discounted_return(self.rewards, gamma, averaging)

    def to_buffer(self, iteration=0):
        return ReplayBuffer(
            Trajectory.from_arrays(self.states[k], self.actions[k], self.rewards[k], iteration=iteration, index=k + 1)
            for k in range(len(self.states))
        )


def _policy_noise(policy, n, T, rng, eps):
    if eps is not None:
        return eps
    if policy.deterministic:
        return None
    return policy.noise((n, T), rng)


def batch_env_rollouts(env, policy, n, rng, noise=None, eps=None, T=None):
    """``n`` environment rollouts in lockstep.

    ``noise`` (``(n, T, n_s)``) and ``eps`` (``(n, T, n_a)``, unscaled policy
    draws) may be passed in to share random numbers between studies.
    """
    T = env.T if T is None else T
    if noise is None:
        noise = env.sample_noise((n, T), rng)
    eps = _policy_noise(policy, n, T, rng, eps)
    S = np.empty((n, T + 1, env.n_s))
    U = np.empty((n, T, env.n_a))
    R = np.empty((n, T))
    S[:, 0] = env.initial_state(rng, n)
    for t in range(T):
        s = S[:, t]
        a = policy.mean(s) if eps is None else policy.act(s, rng, eps=eps[:, t])
        U[:, t] = a
        R[:, t] = env.reward(s, t)
        S[:, t + 1] = env.mean_step(s, a) + noise[:, t]
    return RolloutBatch(S, U, R)


def batch_model_rollouts(model, policy, s0, T, rng, reward, eps=None):
    """Rollouts through a parametric model's sampling distribution."""
    s0 = np.asarray(s0, dtype=float)
    n = len(s0)
    eps = _policy_noise(policy, n, T, rng, eps)
    S = np.empty((n, T + 1, s0.shape[1]))
    U = np.empty((n, T, policy.theta.shape[0]))
    R = np.empty((n, T))
    S[:, 0] = s0
    for t in range(T):
        s = S[:, t]
        a = policy.mean(s) if eps is None else policy.act(s, rng, eps=eps[:, t])
        U[:, t] = a
        R[:, t] = reward(s, t)
        S[:, t + 1] = model.sample(s, a, rng, t)
    return RolloutBatch(S, U, R)


def batch_opc_rollouts(inner, refs, policy, rng, reward, eps=None):
    """One OPC rollout per reference trajectory in ``refs`` (a :class:`RolloutBatch`).

    Starts at each reference's initial state and applies
    ``s' = ref_{t+1} + [f(s, a) - f(ref_t, ref_a_t)]`` with fresh policy actions.
    """
    n, T = refs.actions.shape[:2]
    eps = _policy_noise(policy, n, T, rng, eps)
    S = np.empty_like(refs.states)
    U = np.empty_like(refs.actions)
    R = np.empty((n, T))
    S[:, 0] = refs.states[:, 0]
    for t in range(T):
        s = S[:, t]
        a = policy.mean(s) if eps is None else policy.act(s, rng, eps=eps[:, t])
        U[:, t] = a
        R[:, t] = reward(s, t)
        S[:, t + 1] = refs.states[:, t + 1] + (
            inner.mean(s, a, t) - inner.mean(refs.states[:, t], refs.actions[:, t], t)
        )
    return RolloutBatch(S, U, R)
