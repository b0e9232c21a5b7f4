"""Workers, learner-side orchestration, and the baseline / train / evaluate workflows.

Per episode ``ep`` of a run, with ``A`` actions per episode, the keys are::

    flag/(2 ep)       learner -> worker   [1] run the episode, [0] stop
    state/(ep (A+1) + k)    worker -> learner   observation, k = 0..A
    action/(ep (A+1) + k)   learner -> worker   [front amplitude], k < A
    reward/(ep (A+1) + k)   worker -> learner   one REWARD_FIELDS row, k < A
    flag/(2 ep + 1)   worker -> learner   trailing-window stats sums (7 values),
                                          or [nan] if the flow diverged

State ``k = A`` is the bootstrap observation.  Flags live on ``pe/0``.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import bus as busmod
from .config import RunConfig
from .lbm import ConfigError, FlowDiverged
from .marl import (REWARD_FIELDS, EpisodeAborted, EpisodeDriver, EpisodeSchedule, EpisodeStats,
                   TrajectoryBatch, combine_stats)
from .ppo import Agent, UpdateDiagnostics, load_checkpoint, save_checkpoint
from .spectrum import analyse, write_spectrum_csv

CHUNK = 0.2
STATS_WIDTH = 7
TRAINING_HEADER = ["episode", "mean_cd", "rms_cl", "mean_reward", "reward_drag_term", "reward_lift_term"]
TRAJECTORY_HEADER = ["episode", "sim", "pe", "step", "action", "raw_action", "log_prob", "value",
                     *REWARD_FIELDS]


class WorkerFailure(RuntimeError):
    pass


def fmt(x) -> str:
    return repr(float(x))


# --- baseline record --------------------------------------------------------

@dataclass
class Baseline:
    environment: str
    n_jets: int
    n_probes: int
    dt: float
    cd_b: list
    mean_cd: float
    rms_cl: float
    mean_cl: float
    period: float
    strouhal: float
    snapshot: str
    start_time: float

    def schedule(self, cfg: RunConfig) -> EpisodeSchedule:
        m = cfg.marl
        return EpisodeSchedule.from_period(self.period, self.dt, m.n_actions, m.shedding_cycles,
                                           m.smoothing_rate)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Baseline":
        try:
            with open(path) as fh:
                data = json.load(fh)
            return cls(**data)
        except (OSError, ValueError, TypeError) as exc:
            raise ConfigError(f"cannot read baseline record {path}: {exc}") from exc

    def check(self, cfg: RunConfig) -> None:
        if self.environment != cfg.cli.environment or self.n_jets != cfg.marl.n_jets:
            raise ConfigError("baseline was measured for a different environment or n_jets")


def _force_rows(t, cd, cl):
    cd = np.atleast_2d(cd)
    cl = np.atleast_2d(cl)
    n = cd.shape[1]
    head = ["t", "cd", "cl"] + ([f"cd_{i}" for i in range(n)] + [f"cl_{i}" for i in range(n)] if n > 1 else [])
    rows = []
    for k in range(cd.shape[0]):
        row = [fmt(t[k]), fmt(cd[k].mean()), fmt(cl[k].mean())]
        if n > 1:
            row += [fmt(v) for v in cd[k]] + [fmt(v) for v in cl[k]]
        rows.append(row)
    return head, rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_baseline(cfg: RunConfig, out: Path) -> Baseline:
    """Uncontrolled run: drop the transient, measure, and store the end state."""
    out.mkdir(parents=True, exist_ok=True)
    env = cfg.make_env()
    n_tr = int(round(cfg.cli.transient_units / env.dt))
    n_me = int(round(cfg.cli.measure_units / env.dt))
    zeros = np.zeros((1, env.n_jets))
    chunk = 4096
    done = 0
    while done < n_tr:
        k = min(chunk, n_tr - done)
        env.advance(np.repeat(zeros, k, axis=0))
        done += k
    t0 = env.time
    cd, cl = env.advance(np.repeat(zeros, n_me, axis=0))
    t = t0 + env.dt * np.arange(1, n_me + 1)
    head, rows = _force_rows(t, cd, cl)
    write_csv(out / "baseline_forces.csv", head, rows)
    spec = analyse(t, cl.mean(axis=1))  # raises NoPeakError when nothing sheds
    write_spectrum_csv(out / "baseline_spectrum_cl.csv", spec)
    snap = out / "baseline.snapshot"
    env.save(snap)
    rec = Baseline(
        environment=cfg.cli.environment, n_jets=env.n_jets, n_probes=env.n_probes, dt=env.dt,
        cd_b=[float(v) for v in cd.mean(axis=0)], mean_cd=float(cd.mean()),
        rms_cl=float(np.sqrt(np.mean(cl**2))), mean_cl=float(cl.mean()),
        period=1.0 / spec.peak_frequency, strouhal=spec.strouhal, snapshot=str(snap.resolve()),
        start_time=float(env.time))
    rec.save(out / "baseline.json")
    return rec


# --- blocking helpers -------------------------------------------------------

def blocking_take(bus, key: str, timeout: float, check=None) -> np.ndarray:
    """``wait_take`` in short slices so ``check`` can raise between them."""
    deadline = time.monotonic() + timeout
    while True:
        left = deadline - time.monotonic()
        if left <= 0:
            raise WorkerFailure(f"timed out after {timeout:g}s waiting for {key}")
        try:
            return bus.wait_take(key, min(CHUNK, left) if check else left)
        except busmod.BusTimeout:
            if check is not None:
                check()


def state_keys(run, n_sims, n_jets, step):
    return [busmod.make_key(run, s, p, "state", step) for s in range(n_sims) for p in range(n_jets)]


def orchestrate_step(bus, run_id: int, n_sims: int, n_jets: int, step: int, act_fn,
                     timeout: float, check=None):
    """One barrier: all states in, all actions out, all rewards in.

    ``act_fn(obs)`` gets ``(n_sims n_jets, width)`` observations ordered
    (sim, pe) and returns ``(actions, extra)``.  Returns
    ``(obs, actions, extra, rewards)``.
    """
    obs = np.stack([blocking_take(bus, k, timeout, check) for k in state_keys(run_id, n_sims, n_jets, step)])
    actions, extra = act_fn(obs)
    actions = np.asarray(actions, dtype=float).reshape(n_sims * n_jets)
    i = 0
    for s in range(n_sims):
        for p in range(n_jets):
            bus.put(busmod.make_key(run_id, s, p, "action", step), [actions[i]])
            i += 1
    rewards = np.stack([blocking_take(bus, busmod.make_key(run_id, s, p, "reward", step), timeout, check)
                        for s in range(n_sims) for p in range(n_jets)])
    return obs, actions, extra, rewards


# --- worker -----------------------------------------------------------------

def worker_main(cfg: RunConfig, baseline: Baseline, endpoint: str, run_id: int, sim_id: int,
                first_episode: int = 0, fault: dict | None = None, stop=None) -> None:
    """Environment side of training for one simulation."""
    bus = busmod.connect(endpoint)
    env = cfg.make_env()
    snap = env.load(baseline.snapshot)
    schedule = baseline.schedule(cfg)
    driver = EpisodeDriver(env, schedule, cfg.topology, cfg.weights, baseline.cd_b, cfg.marl.stats_window)
    n_jets, n_act = cfg.marl.n_jets, schedule.n_actions
    timeout = cfg.bus.timeout

    def check():
        if stop is not None and stop():
            raise WorkerFailure("stopped")

    def key(pe, field, step):
        return busmod.make_key(run_id, sim_id, pe, field, step)

    ep = first_episode
    try:
        while True:
            flag = blocking_take(bus, key(0, "flag", 2 * ep), timeout, check)
            if flag.size == 0 or flag[0] == 0:
                return
            driver.reset(snap)
            base = ep * (n_act + 1)
            for k in range(n_act + 1):
                if fault and fault.get("sim") == sim_id and fault.get("episode", 0) == ep \
                        and fault.get("step", 0) == k:
                    if fault.get("mode") == "exit":
                        os._exit(1)
                    return
                obs = driver.observations()
                for p in range(n_jets):
                    bus.put(key(p, "state", base + k), obs[p])
                if k == n_act:
                    break
                acts = np.array([blocking_take(bus, key(p, "action", base + k), timeout, check)[0]
                                 for p in range(n_jets)])
                try:
                    rew = driver.act(acts)
                except FlowDiverged:
                    bus.put(key(0, "flag", 2 * ep + 1), [math.nan])
                    return
                for p in range(n_jets):
                    bus.put(key(p, "reward", base + k), rew[p])
            bus.put(key(0, "flag", 2 * ep + 1), driver.stats_sums())
            ep += 1
    except WorkerFailure:
        return
    finally:
        bus.close()


def _worker_process(*args):
    try:
        worker_main(*args)
    except Exception as exc:  # reported to the learner through liveness
        raise SystemExit(f"worker failed: {exc!r}")


# --- learner ----------------------------------------------------------------

def plateau_reached(rewards, window: int = 10, span: int = 20, tolerance: float = 0.01) -> bool:
    """True when the ``window``-episode moving mean gained less than ``tolerance``
    (relative) over the last ``span`` episodes."""
    r = np.asarray(rewards, dtype=float)
    if r.size < window + span:
        return False
    now = r[-window:].mean()
    then = r[-window - span:-span].mean()
    return (now - then) < tolerance * abs(then)


@dataclass
class EpisodeRecord:
    episode: int
    stats: EpisodeStats
    diagnostics: UpdateDiagnostics | None


class Trainer:
    """Learner plus the worker fleet for one run.

    ``endpoint`` is ``inproc`` (workers are threads) or ``host:port``
    (a bus process and one process per worker; port 0 picks a free port).
    """

    def __init__(self, cfg: RunConfig, baseline: Baseline, out: Path, agent: Agent | None = None,
                 start_episode: int = 0, rng_state: dict | None = None, fault: dict | None = None):
        cfg.validate()
        baseline.check(cfg)
        self.cfg = cfg
        self.baseline = baseline
        self.out = Path(out)
        self.n_sims, self.n_jets = cfg.marl.n_sims, cfg.marl.n_jets
        self.n_in = 3 * baseline.n_probes
        self.agent = agent or Agent(self.n_in, cfg.ppo, seed=cfg.cli.seed)
        if self.agent.n_in != self.n_in:
            raise ConfigError(f"policy input width {self.agent.n_in} != 3 x {baseline.n_probes} probes")
        self.rng = np.random.default_rng(cfg.cli.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.schedule = baseline.schedule(cfg)
        self.episode = start_episode
        self.run_id = 0
        self.fault = fault
        self.counters = {"states": 0, "actions": 0, "rewards": 0, "updates": 0}
        self._threads: list[threading.Thread] = []
        self._procs: list = []
        self._server = None
        self._stop = threading.Event()

    # fleet management

    def _start(self) -> None:
        endpoint = self.cfg.bus.endpoint
        kind, addr = busmod.parse_endpoint(endpoint)
        args = (self.cfg, self.baseline)
        if kind == "inproc":
            self.endpoint = f"inproc://{addr}-{uuid.uuid4().hex}"
            for s in range(self.n_sims):
                t = threading.Thread(target=worker_main, daemon=True, name=f"afc-worker-{s}",
                                     args=(*args, self.endpoint, self.run_id, s, self.episode, self.fault,
                                           self._stop.is_set))
                t.start()
                self._threads.append(t)
        else:
            ctx = mp.get_context("spawn")
            self._server, self.endpoint = busmod.start_server_process(f"{addr[0]}:{addr[1]}", ctx)
            for s in range(self.n_sims):
                p = ctx.Process(target=_worker_process, daemon=True,
                                args=(*args, self.endpoint, self.run_id, s, self.episode, self.fault))
                p.start()
                self._procs.append(p)
        self.bus = busmod.connect(self.endpoint)

    def _check(self) -> None:
        # divergence first: a diverged worker posts its marker and then exits
        for s in range(self.n_sims):
            v = self.bus.get(busmod.make_key(self.run_id, s, 0, "flag", 2 * self.episode + 1))
            if v is not None and v.size == 1:
                raise EpisodeAborted(f"simulation {s} diverged in episode {self.episode}")
        dead = [i for i, t in enumerate(self._threads) if not t.is_alive()]
        dead += [i for i, p in enumerate(self._procs) if not p.is_alive()]
        if dead:
            raise WorkerFailure(f"worker(s) {dead} exited mid-episode")

    def _shutdown(self, graceful: bool) -> None:
        if graceful:
            for s in range(self.n_sims):
                self.bus.put(busmod.make_key(self.run_id, s, 0, "flag", 2 * self.episode), [0.0])
        self._stop.set()
        for t in self._threads:
            t.join(5.0 if graceful else 1.0)
        for p in self._procs:
            p.join(10.0 if graceful else 0.1)
            if p.is_alive():
                p.kill()
                p.join()
        if self._server is not None:
            try:
                self.bus.shutdown()
            except (OSError, busmod.BusError):
                pass
            self._server.join(5.0)
            if self._server.is_alive():
                self._server.kill()
        self.bus.close()
        if self.endpoint.startswith("inproc://"):
            busmod.drop_inproc(self.endpoint[len("inproc://"):])

    # one episode

    def _act(self, obs):
        a, raw, logp, val = self.agent.act(obs, self.rng)
        return a, (raw, logp, val)

    def collect_episode(self):
        """Run one episode across the fleet; returns ``(batch, stats, reward_rows)``."""
        n, A = self.n_sims * self.n_jets, self.schedule.n_actions
        for s in range(self.n_sims):
            self.bus.put(busmod.make_key(self.run_id, s, 0, "flag", 2 * self.episode), [1.0])
        batch = TrajectoryBatch(self.n_sims, self.n_jets)
        rows = []
        base = self.episode * (A + 1)
        timeout = self.cfg.bus.timeout
        for k in range(A):
            obs, act, (raw, logp, val), rew = orchestrate_step(
                self.bus, self.run_id, self.n_sims, self.n_jets, base + k, self._act, timeout, self._check)
            self.counters["states"] += n
            self.counters["actions"] += n
            self.counters["rewards"] += n
            batch.add_step(obs, act, raw, logp, val, rew[:, 0])
            rows.append((k, act, raw, logp, val, rew))
        obs = np.stack([blocking_take(self.bus, key, timeout, self._check)
                        for key in state_keys(self.run_id, self.n_sims, self.n_jets, base + A)])
        self.counters["states"] += n
        batch.bootstrap_values = np.asarray(self.agent.value(obs), dtype=float)
        sums = []
        for s in range(self.n_sims):
            v = blocking_take(self.bus, busmod.make_key(self.run_id, s, 0, "flag", 2 * self.episode + 1),
                              timeout, self._check)
            if v.size != STATS_WIDTH:
                raise EpisodeAborted(f"simulation {s} diverged in episode {self.episode}")
            sums.append(v)
        return batch, combine_stats(np.stack(sums)), rows

    def _write_rows(self, fh, rows) -> None:
        w = csv.writer(fh, lineterminator="\n")
        for k, act, raw, logp, val, rew in rows:
            for i in range(act.size):
                s, p = divmod(i, self.n_jets)
                w.writerow([self.episode, s, p, k, fmt(act[i]), fmt(raw[i]), fmt(logp[i]), fmt(val[i]),
                            *[fmt(x) for x in rew[i]]])

    def checkpoint(self, name: str) -> Path:
        ck = self.out / "checkpoints"
        ck.mkdir(parents=True, exist_ok=True)
        path = ck / name
        save_checkpoint(self.agent, path, {"episode": self.episode, "rng": self.rng.bit_generator.state,
                                           "seed": self.cfg.cli.seed})
        return path

    def run(self, n_episodes: int | None = None, on_episode=None) -> list[EpisodeRecord]:
        """Train until the episode budget or the plateau rule; returns per-episode records."""
        cfg = self.cfg.cli
        budget = cfg.episodes if n_episodes is None else n_episodes
        self.out.mkdir(parents=True, exist_ok=True)
        train_csv = self.out / "training.csv"
        traj_csv = self.out / "trajectories.csv"
        fresh = self.episode == 0
        records: list[EpisodeRecord] = []
        history = []
        if not fresh and train_csv.exists():
            with open(train_csv) as fh:
                history = [float(r["mean_reward"]) for r in csv.DictReader(fh)]
        mode = "w" if fresh else "a"
        with open(train_csv, mode, newline="") as tf, open(traj_csv, mode, newline="") as jf:
            if fresh:
                csv.writer(tf, lineterminator="\n").writerow(TRAINING_HEADER)
                csv.writer(jf, lineterminator="\n").writerow(TRAJECTORY_HEADER)
            if budget <= 0:
                return records
            self._start()
            graceful = False
            try:
                for _ in range(budget):
                    batch, stats, rows = self.collect_episode()
                    if not batch.complete or batch.n_steps != self.schedule.n_actions:
                        raise WorkerFailure("incomplete batch")
                    diag = self.agent.update(batch, self.rng)
                    self.counters["updates"] += 1
                    self._write_rows(jf, rows)
                    csv.writer(tf, lineterminator="\n").writerow([self.episode, *[fmt(v) for v in stats.as_row()]])
                    tf.flush()
                    jf.flush()
                    rec = EpisodeRecord(self.episode, stats, diag)
                    records.append(rec)
                    history.append(stats.mean_reward)
                    self.episode += 1
                    if on_episode is not None:
                        on_episode(rec)
                    if self.episode % cfg.checkpoint_every == 0:
                        self.checkpoint(f"episode_{self.episode:05d}.afcp")
                    if plateau_reached(history, cfg.plateau_window, cfg.plateau_span, cfg.plateau_tolerance):
                        break
                graceful = True
            finally:
                self._shutdown(graceful)
            self.checkpoint("latest.afcp")
        return records


def resume_trainer(cfg: RunConfig, baseline: Baseline, out: Path, checkpoint, fault=None) -> Trainer:
    agent, extra = load_checkpoint(checkpoint)
    return Trainer(cfg, baseline, out, agent, start_episode=int(extra.get("episode", 0)),
                   rng_state=extra.get("rng"), fault=fault)


# --- deterministic evaluation ----------------------------------------------

def _window_stats(t, cd, cl, t_from):
    sel = t > t_from
    return float(cd[sel].mean()), float(np.sqrt(np.mean(cl[sel] ** 2)))


def pct(controlled: float, base: float) -> float:
    return 100.0 * (controlled - base) / base


def evaluate(cfg: RunConfig, baseline: Baseline, agent: Agent, out: Path) -> dict:
    """Deterministic policy from the baseline snapshot; writes CSVs and ``summary.json``."""
    baseline.check(cfg)
    env = cfg.make_env()
    if agent.n_in != 3 * env.n_probes:
        raise ConfigError(f"checkpoint expects {agent.n_in // 3} probes per pseudo-env, config gives {env.n_probes}")
    out.mkdir(parents=True, exist_ok=True)
    sch = baseline.schedule(cfg)
    n_act = max(1, int(round(cfg.cli.eval_units / sch.t_act)))
    driver = EpisodeDriver(env, sch, cfg.topology, cfg.weights, baseline.cd_b, cfg.marl.stats_window)
    driver.reset(env.load(baseline.snapshot))
    t_start = env.time
    for _ in range(n_act):
        driver.act(agent.act_deterministic(driver.observations()))
    h = driver.history()
    t = h["t"] - t_start
    head, rows = _force_rows(t, h["cd"], h["cl"])
    write_csv(out / "eval_forces.csv", head, rows)
    fluxes = env.jet_fluxes(h["amp"])
    amp_head = ["t"] + [f"amp_{i}" for i in range(env.n_jets)] + [f"flux_{i}" for i in range(fluxes.shape[1])]
    write_csv(out / "eval_actions.csv", amp_head,
              [[fmt(t[k]), *[fmt(v) for v in h["amp"][k]], *[fmt(v) for v in fluxes[k]]] for k in range(t.size)])

    cd_c, rms_c = _window_stats(t, h["cd"], h["cl"], cfg.cli.eval_discard_units)
    sel = t > cfg.cli.eval_discard_units
    summary = {
        "delta_definition": "100*(controlled - baseline)/baseline",
        "baseline_mean_cd": baseline.mean_cd,
        "baseline_rms_cl": baseline.rms_cl,
        "baseline_strouhal": baseline.strouhal,
        "controlled_mean_cd": cd_c,
        "controlled_rms_cl": rms_c,
        "delta_cd_pct": pct(cd_c, baseline.mean_cd),
        "delta_cl_rms_pct": pct(rms_c, baseline.rms_cl),
        "controlled_strouhal": None,
        "max_abs_amplitude": float(np.max(np.abs(h["amp"]))) if h["amp"].size else 0.0,
    }
    try:
        spec = analyse(t[sel], h["cl"][sel].mean(axis=1))
        summary["controlled_strouhal"] = spec.strouhal
        write_spectrum_csv(out / "eval_spectrum_cl.csv", spec)
    except ValueError as exc:
        summary["controlled_spectrum_note"] = str(exc)
    try:
        write_spectrum_csv(out / "eval_spectrum_action.csv", analyse(t[sel], h["amp"][sel].mean(axis=1)))
    except ValueError as exc:
        summary["action_spectrum_note"] = str(exc)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
