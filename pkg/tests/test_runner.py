import csv
import json

import numpy as np
import pytest

from afc import cli, runner
from afc.config import RunConfig
from afc.lbm import ConfigError, FlowDiverged
from afc.marl import EpisodeAborted
from afc.ppo import Agent, PpoConfig, policy_forward, save_checkpoint
from afc.runner import (Baseline, Trainer, WorkerFailure, evaluate, plateau_reached, resume_trainer,
                        run_baseline)


def small_config(tmp_path, **marl):
    cfg = RunConfig()
    cfg.cli.out = str(tmp_path / "run")
    cfg.cli.checkpoint_every = 1
    cfg.marl.n_sims = 2
    cfg.marl.n_jets = 3
    cfg.marl.n_probes = 4
    cfg.marl.n_actions = 6
    cfg.ppo.hidden = 8
    cfg.ppo.minibatch_size = 12
    cfg.ppo.epochs_per_update = 2
    cfg.bus.timeout = 30.0
    for k, v in marl.items():
        setattr(cfg.marl, k, v)
    return cfg.validate()


@pytest.fixture(scope="module")
def surrogate_baseline(tmp_path_factory):
    d = tmp_path_factory.mktemp("base")
    cfg = small_config(d)
    return run_baseline(cfg, d)


def snapshot(agent):
    return {k: v.copy() for k, v in agent.params().items()}


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# --- baseline ---------------------------------------------------------------

def test_surrogate_baseline(surrogate_baseline, tmp_path):
    b = surrogate_baseline
    assert b.strouhal == pytest.approx(0.2, rel=0.01)
    assert b.period == pytest.approx(5.0, rel=0.01)
    # limit cycle: cd = cd0 + c1 r^2 with r^2 = sigma / ell = 1, slightly reduced by
    # diffusive coupling between phase-shifted neighbours
    assert b.mean_cd == pytest.approx(2.0, rel=0.01) and b.mean_cd < 2.0
    assert abs(b.mean_cl) < 0.02
    assert len(b.cd_b) == 3


def test_baseline_record_round_trip(surrogate_baseline, tmp_path):
    surrogate_baseline.save(tmp_path / "b.json")
    assert Baseline.load(tmp_path / "b.json") == surrogate_baseline
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        Baseline.load(tmp_path / "bad.json")


def test_baseline_topology_check(surrogate_baseline, tmp_path):
    cfg = small_config(tmp_path, n_jets=2)
    with pytest.raises(ConfigError):
        Trainer(cfg, surrogate_baseline, tmp_path)


# --- plateau rule -----------------------------------------------------------

def test_plateau_rule():
    assert not plateau_reached([1.0] * 29)
    assert plateau_reached([1.0] * 30)
    rising = list(np.linspace(0, 3, 30))
    assert not plateau_reached(rising)
    assert not plateau_reached(rising[:10] + [rising[9]] * 20)
    assert plateau_reached(rising[:10] + [rising[9]] * 30)
    assert plateau_reached([-1.0] * 30)
    assert not plateau_reached([-1.0] * 10 + [-0.5] * 20)


# --- training loop ----------------------------------------------------------

@pytest.mark.parametrize("n_sims,n_jets", [(1, 1), (2, 3)])
def test_batch_counts(surrogate_baseline, tmp_path, n_sims, n_jets):
    base = surrogate_baseline
    if n_jets != base.n_jets:
        cfg = small_config(tmp_path / "b", n_jets=n_jets)
        base = run_baseline(cfg, tmp_path / "b")
    cfg = small_config(tmp_path, n_sims=n_sims, n_jets=n_jets)
    tr = Trainer(cfg, base, tmp_path / "r")
    recs = tr.run(2)
    n = n_sims * n_jets
    A = cfg.marl.n_actions
    assert len(recs) == 2 and tr.agent.updates == 2
    assert tr.counters == {"states": 2 * (A + 1) * n, "actions": 2 * A * n, "rewards": 2 * A * n, "updates": 2}
    rows = read_rows(tmp_path / "r" / "trajectories.csv")
    assert len(rows) - 1 == 2 * A * n
    assert len(read_rows(tmp_path / "r" / "training.csv")) == 3
    amps = np.array([float(r[4]) for r in rows[1:]])
    assert np.all(np.abs(amps) < 1.125)


def test_budget_zero_writes_headers_only(surrogate_baseline, tmp_path):
    cfg = small_config(tmp_path)
    tr = Trainer(cfg, surrogate_baseline, tmp_path / "r")
    assert tr.run(0) == []
    assert read_rows(tmp_path / "r" / "training.csv") == [runner.TRAINING_HEADER]


def test_inproc_runs_are_bitwise_identical(surrogate_baseline, tmp_path):
    for name in ("a", "b"):
        Trainer(small_config(tmp_path), surrogate_baseline, tmp_path / name).run(2)
    for f in ("training.csv", "trajectories.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_continues_exactly(surrogate_baseline, tmp_path):
    Trainer(small_config(tmp_path), surrogate_baseline, tmp_path / "straight").run(3)
    first = Trainer(small_config(tmp_path), surrogate_baseline, tmp_path / "split")
    first.run(2)
    ck = tmp_path / "split" / "checkpoints" / "latest.afcp"
    second = resume_trainer(small_config(tmp_path), surrogate_baseline, tmp_path / "split", ck)
    x = np.random.default_rng(0).standard_normal((10, first.n_in))
    assert np.array_equal(policy_forward(first.agent.policy, x)[0], policy_forward(second.agent.policy, x)[0])
    assert second.episode == 2
    second.run(1)
    for f in ("training.csv", "trajectories.csv"):
        assert (tmp_path / "straight" / f).read_bytes() == (tmp_path / "split" / f).read_bytes()
    assert (tmp_path / "split" / "checkpoints" / "episode_00003.afcp").exists()


@pytest.mark.parametrize("step", [0, 3, 6])
def test_fault_injection_inproc_blocks_update(surrogate_baseline, tmp_path, step):
    cfg = small_config(tmp_path)
    tr = Trainer(cfg, surrogate_baseline, tmp_path / "r",
                 fault={"sim": 1, "episode": 0, "step": step, "mode": "return"})
    before = snapshot(tr.agent)
    with pytest.raises(WorkerFailure):
        tr.run(1)
    assert tr.agent.updates == 0 and same_params(before, snapshot(tr.agent))
    assert read_rows(tmp_path / "r" / "training.csv") == [runner.TRAINING_HEADER]


def test_fault_injection_network_blocks_update(surrogate_baseline, tmp_path):
    cfg = small_config(tmp_path)
    cfg.bus.endpoint = "127.0.0.1:0"
    tr = Trainer(cfg, surrogate_baseline, tmp_path / "r",
                 fault={"sim": 0, "episode": 1, "step": 2, "mode": "exit"})
    with pytest.raises(WorkerFailure):
        tr.run(3)
    # episode 0 completed and was learned from; episode 1 was not
    assert tr.agent.updates == 1 and tr.episode == 1
    assert len(read_rows(tmp_path / "r" / "training.csv")) == 2


def test_divergence_aborts_without_update(surrogate_baseline, tmp_path, monkeypatch):
    calls = {"n": 0}
    real_act = runner.EpisodeDriver.act

    def flaky(self, actions):
        calls["n"] += 1
        if calls["n"] == 4:
            raise FlowDiverged(17)
        return real_act(self, actions)

    monkeypatch.setattr(runner.EpisodeDriver, "act", flaky)
    tr = Trainer(small_config(tmp_path), surrogate_baseline, tmp_path / "r")
    before = snapshot(tr.agent)
    with pytest.raises(EpisodeAborted):
        tr.run(1)
    assert tr.agent.updates == 0 and same_params(before, snapshot(tr.agent))


# --- evaluation -------------------------------------------------------------

def zero_agent(n_in):
    agent = Agent(n_in, PpoConfig(hidden=8))
    agent.policy["w3"][:] = 0
    agent.policy["b3"][:] = 0
    return agent


def test_zero_policy_evaluation_matches_baseline(surrogate_baseline, tmp_path):
    cfg = small_config(tmp_path)
    s = evaluate(cfg, surrogate_baseline, zero_agent(12), tmp_path / "e")
    assert abs(s["delta_cd_pct"]) < 0.5
    assert abs(s["delta_cl_rms_pct"]) < 3.0
    assert s["max_abs_amplitude"] == 0.0
    assert s["controlled_strouhal"] == pytest.approx(0.2, rel=0.05)
    with open(tmp_path / "e" / "summary.json") as fh:
        assert json.load(fh)["delta_definition"] == "100*(controlled - baseline)/baseline"
    acts = read_rows(tmp_path / "e" / "eval_actions.csv")
    assert acts[0][:4] == ["t", "amp_0", "amp_1", "amp_2"]


def test_evaluation_is_reproducible(surrogate_baseline, tmp_path):
    cfg = small_config(tmp_path)
    agent = Agent(12, PpoConfig(hidden=8), seed=4)
    for d in ("a", "b"):
        evaluate(cfg, surrogate_baseline, agent, tmp_path / d)
    for f in ("eval_forces.csv", "eval_actions.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    fl = np.array(read_rows(tmp_path / "a" / "eval_actions.csv")[1:], dtype=float)[:, 4:]
    assert np.max(np.abs(fl[:, 0::2] + fl[:, 1::2])) <= 1e-12


def test_evaluation_topology_mismatch(surrogate_baseline, tmp_path):
    with pytest.raises(ConfigError):
        evaluate(small_config(tmp_path), surrogate_baseline, zero_agent(15), tmp_path / "e")
    with pytest.raises(ConfigError):
        Trainer(small_config(tmp_path), surrogate_baseline, tmp_path / "r", agent=zero_agent(15))


# --- command line -----------------------------------------------------------

def write_cfg(tmp_path, extra=""):
    cfg = small_config(tmp_path)
    cfg.cli.episodes = 0
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_ini() + extra)
    return p


def test_cli_workflow(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("AFC_BUS", raising=False)
    p = write_cfg(tmp_path)
    out = tmp_path / "cli"
    assert cli.main(["baseline", "--config", str(p), "--out", str(out)]) == 0
    for f in ("baseline.json", "baseline_forces.csv", "baseline_spectrum_cl.csv", "baseline.snapshot",
              "config.ini"):
        assert (out / f).exists()
    assert cli.main(["train", "--config", str(p), "--out", str(out)]) == 0
    capsys.readouterr()
    base = Baseline.load(out / "baseline.json")
    save_checkpoint(zero_agent(3 * base.n_probes), out / "z.afcp")
    assert cli.main(["evaluate", "--config", str(p), "--out", str(out), "--checkpoint", str(out / "z.afcp")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert abs(summary["delta_cd_pct"]) < 0.5
    assert cli.main(["spectrum", str(out / "baseline_forces.csv"), "--column", "cl"]) == 0
    assert json.loads(capsys.readouterr().out)["strouhal"] == pytest.approx(0.2, rel=0.01)


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("AFC_BUS", raising=False)
    bad = tmp_path / "bad.ini"
    bad.write_text("[marl-harness]\nn_sims = 0\n")
    assert cli.main(["baseline", "--config", str(bad)]) == 2
    assert cli.main(["evaluate", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "none")]) == 2
    noise = tmp_path / "noise.csv"
    rng = np.random.default_rng(0)
    noise.write_text("t,cl\n" + "".join(f"{i * 0.1!r},{v!r}\n" for i, v in enumerate(rng.standard_normal(512))))
    assert cli.main(["spectrum", str(noise)]) == 1
    assert cli.main(["spectrum", str(tmp_path / "missing.csv")]) == 2

    p = write_cfg(tmp_path)
    run_baseline(small_config(tmp_path), tmp_path / "fail")
    for exc, code in ((WorkerFailure("x"), 4), (EpisodeAborted("y"), 3)):
        class Boom:
            def __init__(self, *a, **k):
                pass

            def run(self, *a, **k):
                raise exc

        monkeypatch.setattr(cli, "Trainer", Boom)
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "fail")]) == code
