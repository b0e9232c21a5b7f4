"""Pseudo-environment control loop: observation stacking, action smoothing, rewards.

One simulation is split into ``n_jets`` spanwise pseudo-environments that all
share one policy.  Each pseudo-environment sees its own probes plus those of
its two ring neighbours, and is rewarded by a blend of its local reward and the
mean local reward over the simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lbm import AMPLITUDE_BOUND, ConfigError, FlowDiverged

REWARD_FIELDS = ("reward", "local_reward", "cd", "cl", "drag_term", "lift_term")


class EpisodeAborted(RuntimeError):
    """The environment diverged mid-episode; the batch is incomplete."""


@dataclass(frozen=True)
class PseudoEnvTopology:
    n_jets: int = 3

    def __post_init__(self):
        if self.n_jets < 1:
            raise ConfigError("n_jets must be >= 1")

    def neighbors(self, i: int) -> tuple[int, int]:
        return (i - 1) % self.n_jets, (i + 1) % self.n_jets


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.3
    beta: float = 0.8

    def __post_init__(self):
        if self.alpha < 0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError("reward weights need alpha >= 0 and beta in [0, 1]")


class BaselineStats:
    """Baseline drag plus the episode-accumulated mean lift of one pseudo-env."""

    def __init__(self, cd_b: float):
        self.cd_b = float(cd_b)
        self._samples: list[float] = []

    @property
    def sample_count(self) -> int:
        return len(self._samples)

    @property
    def cl_avg(self) -> float:
        if not self._samples:
            return 0.0
        return math.fsum(self._samples) / len(self._samples)

    def feed(self, cl: float) -> float:
        self._samples.append(float(cl))
        return self.cl_avg

    def reset(self) -> None:
        self._samples.clear()


@dataclass(frozen=True)
class EpisodeSchedule:
    """Action timing in convective units, quantised to whole substeps."""

    n_actions: int
    substeps_per_action: int
    dt: float
    smoothing_rate: float = 5.0

    @property
    def t_act(self) -> float:
        return self.substeps_per_action * self.dt

    @property
    def t_eps(self) -> float:
        return self.n_actions * self.t_act

    @classmethod
    def from_period(cls, period: float, dt: float, n_actions: int = 120, cycles: float = 6.0,
                    smoothing_rate: float = 5.0) -> "EpisodeSchedule":
        if period <= 0 or n_actions < 1:
            raise ConfigError("schedule needs a positive period and at least one action")
        sub = max(1, int(round(cycles * period / (n_actions * dt))))
        return cls(n_actions, sub, dt, smoothing_rate)


@dataclass
class Transition:
    observation: np.ndarray
    action: float
    raw_action: float
    log_prob: float
    value_estimate: float
    reward: float


@dataclass
class TrajectoryBatch:
    """Per-step arrays shaped ``(n_actions, n_agents)``; agents ordered (sim, pe)."""

    n_sims: int
    n_jets: int
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    raw_actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    bootstrap_values: np.ndarray | None = None

    @property
    def n_agents(self) -> int:
        return self.n_sims * self.n_jets

    @property
    def n_steps(self) -> int:
        return len(self.rewards)

    @property
    def complete(self) -> bool:
        n = self.n_agents
        if self.bootstrap_values is None or self.bootstrap_values.shape != (n,) or not self.rewards:
            return False
        cols = (self.observations, self.actions, self.raw_actions, self.log_probs, self.values, self.rewards)
        return all(len(c) == self.n_steps and all(np.shape(x)[0] == n for x in c) for c in cols)

    def add_step(self, obs, actions, raw, logp, values, rewards) -> None:
        self.observations.append(np.asarray(obs, dtype=float))
        self.actions.append(np.asarray(actions, dtype=float))
        self.raw_actions.append(np.asarray(raw, dtype=float))
        self.log_probs.append(np.asarray(logp, dtype=float))
        self.values.append(np.asarray(values, dtype=float))
        self.rewards.append(np.asarray(rewards, dtype=float))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "observations": np.stack(self.observations),
            "actions": np.stack(self.actions),
            "raw_actions": np.stack(self.raw_actions),
            "log_probs": np.stack(self.log_probs),
            "values": np.stack(self.values),
            "rewards": np.stack(self.rewards),
            "bootstrap_values": np.asarray(self.bootstrap_values),
        }

    def transitions(self):
        for t in range(self.n_steps):
            for j in range(self.n_agents):
                yield t, j, Transition(self.observations[t][j], float(self.actions[t][j]),
                                       float(self.raw_actions[t][j]), float(self.log_probs[t][j]),
                                       float(self.values[t][j]), float(self.rewards[t][j]))


def assemble_observation(self_probes, left_probes, right_probes) -> np.ndarray:
    s, l, r = (np.asarray(v, dtype=float) for v in (self_probes, left_probes, right_probes))
    if not (s.shape == l.shape == r.shape) or s.ndim != 1:
        raise ValueError("probe vectors must be 1-D and of equal length")
    return np.concatenate([l, s, r])


def stacked_observations(probes: np.ndarray, topology: PseudoEnvTopology) -> np.ndarray:
    out = []
    for i in range(topology.n_jets):
        left, right = topology.neighbors(i)
        out.append(assemble_observation(probes[i], probes[left], probes[right]))
    return np.stack(out)


def local_reward(cd_b, cd, cl, cl_avg, alpha):
    vals = (cd_b, cd, cl, cl_avg, alpha)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("local reward needs finite inputs")
    return (cd_b - cd) - alpha * abs(cl - cl_avg)


def global_reward(locals_, i: int, beta: float) -> float:
    r = np.asarray(locals_, dtype=float)
    if r.size == 0:
        raise ValueError("global reward needs at least one local reward")
    return beta * r[i] + (1.0 - beta) / r.size * r.sum()


def _blend(prev, nxt, w):
    # convex form: exact at both ends, never outside [min, max] of the endpoints
    out = w * prev + (1.0 - w) * nxt
    return np.clip(out, np.minimum(prev, nxt), np.maximum(prev, nxt))


def smooth_action(prev: float, nxt: float, elapsed: float, t_act: float, rate: float = 5.0) -> float:
    """``nxt + (prev - nxt) exp(-rate elapsed / t_act)``."""
    return float(_blend(prev, nxt, math.exp(-rate * elapsed / t_act)))


def pair_constraint(front: float) -> float:
    if abs(front) > AMPLITUDE_BOUND:
        raise ValueError(f"front amplitude {front} outside [-{AMPLITUDE_BOUND}, {AMPLITUDE_BOUND}]")
    return -front


@dataclass
class EpisodeStats:
    mean_cd: float
    rms_cl: float
    mean_reward: float
    reward_drag_term: float
    reward_lift_term: float

    def as_row(self) -> list[float]:
        return [self.mean_cd, self.rms_cl, self.mean_reward, self.reward_drag_term, self.reward_lift_term]


class EpisodeDriver:
    """Environment side of one episode.

    ``reset`` restores the baseline snapshot, ``observations`` returns the
    neighbour-stacked observation of every pseudo-env, and ``act`` applies one
    action interval and returns a ``(n_jets, 6)`` array of ``REWARD_FIELDS``.
    """

    def __init__(self, env, schedule: EpisodeSchedule, topology: PseudoEnvTopology,
                 weights: RewardWeights, cd_b, window: float = 5.0):
        if topology.n_jets != env.n_jets:
            raise ConfigError("topology and environment disagree on n_jets")
        self.env = env
        self.schedule = schedule
        self.topology = topology
        self.weights = weights
        self.window = window
        cd_b = np.broadcast_to(np.asarray(cd_b, dtype=float), (topology.n_jets,))
        self.stats = [BaselineStats(v) for v in cd_b]
        self.prev = np.zeros(topology.n_jets)
        self._hist_t: list[np.ndarray] = []
        self._hist_cd: list[np.ndarray] = []
        self._hist_cl: list[np.ndarray] = []
        self._hist_amp: list[np.ndarray] = []
        self._rewards: list[tuple[float, np.ndarray]] = []

    def reset(self, snapshot) -> None:
        self.env.restore(snapshot)
        self.prev = np.zeros(self.topology.n_jets)
        for s in self.stats:
            s.reset()
        self._hist_t.clear()
        self._hist_cd.clear()
        self._hist_cl.clear()
        self._hist_amp.clear()
        self._rewards.clear()

    def observations(self) -> np.ndarray:
        return stacked_observations(self.env.observe(), self.topology)

    def act(self, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=float).reshape(self.topology.n_jets)
        for a in targets:
            pair_constraint(a)
        sch = self.schedule
        n = sch.substeps_per_action
        elapsed = (np.arange(1, n + 1) * sch.dt)[:, None]
        decay = np.exp(-sch.smoothing_rate * elapsed / sch.t_act)
        amps = _blend(self.prev[None, :], targets[None, :], decay)
        t0 = self.env.time
        cd, cl = self.env.advance(amps)
        self.prev = amps[-1].copy()
        self._hist_t.append(t0 + elapsed[:, 0])
        self._hist_cd.append(cd)
        self._hist_cl.append(cl)
        self._hist_amp.append(amps)

        out = np.empty((self.topology.n_jets, len(REWARD_FIELDS)))
        alpha = self.weights.alpha
        for i, st in enumerate(self.stats):
            cd_i = float(np.mean(cd[:, i]))
            cl_i = float(np.mean(cl[:, i]))
            cl_avg = st.feed(cl_i)
            drag = st.cd_b - cd_i
            lift = -alpha * abs(cl_i - cl_avg)
            out[i, 1:] = (local_reward(st.cd_b, cd_i, cl_i, cl_avg, alpha), cd_i, cl_i, drag, lift)
        locs = out[:, 1].copy()
        for i in range(self.topology.n_jets):
            out[i, 0] = global_reward(locs, i, self.weights.beta)
        self._rewards.append((self.env.time, out.copy()))
        return out

    def history(self) -> dict[str, np.ndarray]:
        if not self._hist_t:
            nj = self.topology.n_jets
            empty = np.zeros((0, nj))
            return {"t": np.zeros(0), "cd": empty, "cl": empty, "amp": empty}
        return {
            "t": np.concatenate(self._hist_t),
            "cd": np.concatenate(self._hist_cd),
            "cl": np.concatenate(self._hist_cl),
            "amp": np.concatenate(self._hist_amp),
        }

    def stats_sums(self) -> np.ndarray:
        """Additive trailing-window sums so several simulations combine exactly.

        Layout: [sum cd, sum cl^2, n samples, sum r, sum drag, sum lift, n rewards].
        """
        h = self.history()
        if h["t"].size == 0:
            return np.zeros(7)
        t_end = h["t"][-1]
        sel = h["t"] > t_end - self.window - 1e-12
        cd = h["cd"][sel]
        cl = h["cl"][sel]
        rw = [r for t, r in self._rewards if t > t_end - self.window - 1e-12]
        rw = np.concatenate(rw) if rw else np.zeros((0, len(REWARD_FIELDS)))
        return np.array([cd.sum(), (cl**2).sum(), cd.size, rw[:, 1].sum(), rw[:, 4].sum(),
                         rw[:, 5].sum(), rw.shape[0]])


def combine_stats(sums) -> EpisodeStats:
    s = np.sum(np.atleast_2d(sums), axis=0)
    n, m = max(s[2], 1.0), max(s[6], 1.0)
    return EpisodeStats(s[0] / n, math.sqrt(s[1] / n), s[3] / m, s[4] / m, s[5] / m)


def run_episode(env, policy, schedule: EpisodeSchedule, topology: PseudoEnvTopology,
                weights: RewardWeights, cd_b, snapshot, rng=None, window: float = 5.0):
    """Single-simulation episode with a local policy.

    ``policy.act(obs, rng)`` maps ``(n_jets, 3 n_probes)`` observations to
    ``(actions, raw_actions, log_probs, values)`` and ``policy.value(obs)``
    gives state values.  Returns the trajectory batch, the episode statistics
    and the driver (for its history).
    """
    driver = EpisodeDriver(env, schedule, topology, weights, cd_b, window)
    driver.reset(snapshot)
    batch = TrajectoryBatch(1, topology.n_jets)
    try:
        for _ in range(schedule.n_actions):
            obs = driver.observations()
            act, raw, logp, val = policy.act(obs, rng)
            rew = driver.act(act)
            batch.add_step(obs, act, raw, logp, val, rew[:, 0])
        batch.bootstrap_values = np.asarray(policy.value(driver.observations()), dtype=float)
    except FlowDiverged as exc:
        raise EpisodeAborted(str(exc)) from exc
    return batch, combine_stats(driver.stats_sums()), driver
