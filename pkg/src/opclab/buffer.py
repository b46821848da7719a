"""Replay buffer of on-environment trajectories and its CSV form."""

import csv
import io

import numpy as np

from opclab.env import Trajectory, Transition
from opclab.errors import ContractError

FLOAT_FMT = ".17g"


def fmt_float(x):
    return format(float(x), FLOAT_FMT)


class ReplayBuffer:
    """Trajectories grouped by MBRL iteration, in insertion order.

    Positions used by the replay and OPC models (``b``) index
    :attr:`trajectories`, which is a frozen snapshot: appending or retaining
    builds new tuples rather than mutating the old one, so readers holding a
    snapshot are unaffected by the writer.
    """

    def __init__(self, trajectories=()):
        trajs = tuple(trajectories)
        for tr in trajs:
            if len(tr) == 0:
                raise ContractError("replay buffer trajectories must be non-empty")
        self._trajs = trajs

    @property
    def trajectories(self):
        return self._trajs

    def __len__(self):
        return len(self._trajs)

    def __getitem__(self, b):
        return self._trajs[b]

    def __iter__(self):
        return iter(self._trajs)

    @property
    def iterations(self):
        return sorted({tr.iteration for tr in self._trajs})

    def add(self, trajectories):
        trajectories = [trajectories] if isinstance(trajectories, Trajectory) else list(trajectories)
        for tr in trajectories:
            if len(tr) == 0:
                raise ContractError("replay buffer trajectories must be non-empty")
        self._trajs = self._trajs + tuple(trajectories)
        return self

    def retain(self, current_iteration, K):
        """New buffer holding only iterations ``> current_iteration - K``."""
        if K < 1:
            raise ContractError("retention window K must be >= 1")
        return ReplayBuffer(tr for tr in self._trajs if tr.iteration > current_iteration - K)

    def transitions(self):
        return [tr for traj in self._trajs for tr in traj.transitions]

    def stacked(self, length=None):
        """``(states, actions)`` arrays of shape ``(B, L+1, n_s)`` / ``(B, L, n_a)``.

        All trajectories must share the length ``L`` (defaults to the first).
        """
        length = len(self._trajs[0]) if length is None else length
        if any(len(tr) < length for tr in self._trajs):
            raise ContractError("trajectories are shorter than the requested length")
        states = np.stack([tr.states[: length + 1] for tr in self._trajs])
        actions = np.stack([tr.actions[:length] for tr in self._trajs])
        return states, actions

    # --- CSV -----------------------------------------------------------------

    def header(self):
        n_s = self._trajs[0].states.shape[1]
        n_a = self._trajs[0].actions.shape[1]
        return transition_header(n_s, n_a)

    def to_csv(self, path=None):
        """Write one row per transition; returns the text when ``path`` is None."""
        buf = io.StringIO(newline="")
        w = csv.writer(buf)
        w.writerow(self.header())
        for traj in self._trajs:
            for tr in traj.transitions:
                w.writerow(
                    [traj.iteration, traj.index, tr.t]
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

    @classmethod
    def from_csv(cls, source):
        """Inverse of :meth:`to_csv`; ``source`` is a path or the CSV text."""
        if "\n" in source:
            text = source
        else:
            with open(source, newline="") as f:
                text = f.read()
        rows = list(csv.reader(io.StringIO(text, newline="")))
        header, rows = rows[0], rows[1:]
        n_s = sum(1 for h in header if h.startswith("s") and not h.startswith("s_next"))
        n_a = sum(1 for h in header if h.startswith("a"))
        groups = {}
        order = []
        for row in rows:
            key = (int(row[0]), int(row[1]))
            if key not in groups:
                groups[key] = []
                order.append(key)
            vals = [float(x) for x in row[3: 3 + 2 * n_s + n_a + 1]]
            s = np.array(vals[:n_s])
            a = np.array(vals[n_s: n_s + n_a])
            s1 = np.array(vals[n_s + n_a: 2 * n_s + n_a])
            groups[key].append(Transition(int(row[2]), s, a, s1, vals[-1], bool(int(row[-1]))))
        return cls(Trajectory(groups[k], k[0], k[1]) for k in order)


def transition_header(n_s, n_a):
    return (
        ["iteration", "b", "t"]
        + [f"s{i}" for i in range(n_s)]
        + [f"a{i}" for i in range(n_a)]
        + [f"s_next{i}" for i in range(n_s)]
        + ["reward", "terminal"]
    )


def buffer_retain(buffer, current_iteration, K):
    return buffer.retain(current_iteration, K)
