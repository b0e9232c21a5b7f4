"""PPO with a tanh-squashed Gaussian policy over the front-jet amplitude.

Both networks are ``[n_in, H, H, 1]`` tanh MLPs with hand-written backward
passes.  One agent is shared by every pseudo-environment of every simulation.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .lbm import AMPLITUDE_BOUND, ConfigError

LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"AFCP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    epochs_per_update: int = 10
    minibatch_size: int = 30
    entropy_coefficient: float = 0.005
    value_coefficient: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 512
    init_log_std: float = -0.5

    def validate(self) -> "PpoConfig":
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError("clip_epsilon must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if self.epochs_per_update < 1 or self.minibatch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, minibatch size and hidden width must be positive")
        return self


# --- networks ---------------------------------------------------------------

MLP_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


def init_mlp(n_in: int, hidden: int, rng: np.random.Generator, out_scale: float = 1.0) -> dict:
    p = {}
    for i, (a, b) in enumerate(((n_in, hidden), (hidden, hidden), (hidden, 1)), start=1):
        p[f"w{i}"] = rng.standard_normal((a, b)) / math.sqrt(a)
        p[f"b{i}"] = np.zeros(b)
    p["w3"] *= out_scale
    return p


def mlp_forward(p: dict, x: np.ndarray):
    h1 = np.tanh(x @ p["w1"] + p["b1"])
    h2 = np.tanh(h1 @ p["w2"] + p["b2"])
    out = (h2 @ p["w3"] + p["b3"])[:, 0]
    return out, (x, h1, h2)


def mlp_backward(p: dict, cache, dout: np.ndarray) -> dict:
    x, h1, h2 = cache
    d = dout[:, None]
    g = {"w3": h2.T @ d, "b3": d.sum(axis=0)}
    dz2 = (d @ p["w3"].T) * (1.0 - h2 * h2)
    g["w2"] = h1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ p["w2"].T) * (1.0 - h1 * h1)
    g["w1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    return g


def policy_forward(params: dict, observation):
    """Action mean and standard deviation in pre-squash space."""
    x = np.atleast_2d(np.asarray(observation, dtype=float))
    if x.shape[1] != params["w1"].shape[0]:
        raise ValueError(f"observation width {x.shape[1]} != input layer {params['w1'].shape[0]}")
    mean, _ = mlp_forward(params, x)
    std = np.exp(params["log_std"][0])
    return mean, np.full_like(mean, std)


def value_forward(params: dict, observation) -> np.ndarray:
    x = np.atleast_2d(np.asarray(observation, dtype=float))
    if x.shape[1] != params["w1"].shape[0]:
        raise ValueError(f"observation width {x.shape[1]} != input layer {params['w1'].shape[0]}")
    return mlp_forward(params, x)[0]


# --- squashed Gaussian ------------------------------------------------------

def _log1m_tanh2(z):
    # log(1 - tanh(z)^2), stable for large |z|
    z = np.abs(z)
    return 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))


def squashed_log_prob(raw, mean, std):
    raw = np.asarray(raw, dtype=float)
    gauss = -0.5 * ((raw - mean) / std) ** 2 - np.log(std) - 0.5 * LOG_2PI
    return gauss - math.log(AMPLITUDE_BOUND) - _log1m_tanh2(raw)


def squash(raw):
    return AMPLITUDE_BOUND * np.tanh(raw)


def sample_action(mean, std, rng: np.random.Generator):
    """Returns ``(action, raw, log_prob)``; the action lies strictly inside the bound."""
    mean = np.asarray(mean, dtype=float)
    raw = mean + np.asarray(std) * rng.standard_normal(mean.shape)
    a = squash(raw)
    a = np.clip(a, -np.nextafter(AMPLITUDE_BOUND, 0.0), np.nextafter(AMPLITUDE_BOUND, 0.0))
    return a, raw, squashed_log_prob(raw, mean, std)


def deterministic_action(mean):
    return squash(np.asarray(mean, dtype=float))


# --- advantages -------------------------------------------------------------

def gae(rewards, values, bootstrap_value, gamma: float, lam: float):
    """Generalised advantage estimation along axis 0 (time).

    Returns ``(advantages, returns)``, un-normalised.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape[0] == 0:
        raise ValueError("gae needs at least one step")
    if r.shape != v.shape:
        raise ValueError("rewards and values must have equal shapes")
    nxt = np.concatenate([v[1:], np.asarray(bootstrap_value, dtype=float)[None, ...]], axis=0)
    delta = r + gamma * nxt - v
    adv = np.empty_like(delta)
    acc = np.zeros_like(delta[0])
    for t in range(r.shape[0] - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# --- agent ------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class UpdateDiagnostics:
    mean_ratio: float
    clip_fraction: float
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float
    rolled_back: bool = False


def ppo_loss_and_grads(policy: dict, value: dict, mb: dict, cfg: PpoConfig):
    """Loss to minimise and its gradients for one minibatch.

    ``mb`` holds ``obs``, ``raw``, ``log_prob`` (from sampling time), ``adv``
    and ``ret``.  Gradient keys are prefixed ``pi.`` and ``v.``.
    """
    obs = mb["obs"]
    n = obs.shape[0]
    mean, pcache = mlp_forward(policy, obs)
    log_std = policy["log_std"][0]
    std = math.exp(log_std)
    z = (mb["raw"] - mean) / std
    logp = squashed_log_prob(mb["raw"], mean, std)
    ratio = np.exp(logp - mb["log_prob"])
    adv = mb["adv"]
    eps = cfg.clip_epsilon
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    active = surr1 <= surr2
    policy_obj = np.minimum(surr1, surr2).mean()
    entropy = log_std + 0.5 * (LOG_2PI + 1.0)

    vpred, vcache = mlp_forward(value, obs)
    verr = vpred - mb["ret"]
    value_loss = np.mean(verr**2)
    loss = -policy_obj + cfg.value_coefficient * value_loss - cfg.entropy_coefficient * entropy

    # d(-policy_obj)/d logp for the active branch
    dlogp = np.where(active, -surr1 / n, 0.0)
    dmean = dlogp * z / std
    grads = {f"pi.{k}": g for k, g in mlp_backward(policy, pcache, dmean).items()}
    grads["pi.log_std"] = np.array([np.sum(dlogp * (z * z - 1.0)) - cfg.entropy_coefficient])
    grads.update({f"v.{k}": g for k, g in mlp_backward(value, vcache, 2.0 * cfg.value_coefficient * verr / n).items()})
    info = {
        "ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "policy_loss": float(-policy_obj),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
    }
    return float(loss), grads, info


class Agent:
    """Shared actor-critic plus optimiser state."""

    def __init__(self, n_in: int, cfg: PpoConfig | None = None, seed: int = 0):
        self.cfg = (cfg or PpoConfig()).validate()
        self.n_in = n_in
        rng = np.random.default_rng(seed)
        self.policy = init_mlp(n_in, self.cfg.hidden, rng, out_scale=0.01)
        self.policy["log_std"] = np.array([self.cfg.init_log_std])
        self.critic = init_mlp(n_in, self.cfg.hidden, rng)
        self.opt = Adam(self.cfg.learning_rate)
        self.updates = 0

    # flat views used by the optimiser and checkpoints
    def params(self) -> dict[str, np.ndarray]:
        out = {f"pi.{k}": v for k, v in self.policy.items()}
        out.update({f"v.{k}": v for k, v in self.critic.items()})
        return out

    def act(self, obs, rng: np.random.Generator):
        mean, std = policy_forward(self.policy, obs)
        a, raw, logp = sample_action(mean, std, rng)
        return a, raw, logp, value_forward(self.critic, obs)

    def act_deterministic(self, obs):
        mean, _ = policy_forward(self.policy, obs)
        return deterministic_action(mean)

    def value(self, obs) -> np.ndarray:
        return value_forward(self.critic, obs)

    def update(self, batch, rng: np.random.Generator) -> UpdateDiagnostics:
        """One PPO update on a complete TrajectoryBatch; rolls back on a non-finite loss."""
        if not batch.complete:
            raise ValueError("refusing to update on an incomplete batch")
        cfg = self.cfg
        arr = batch.arrays()
        adv, ret = gae(arr["rewards"], arr["values"], arr["bootstrap_values"], cfg.gamma, cfg.gae_lambda)
        data = {
            "obs": arr["observations"].reshape(-1, arr["observations"].shape[-1]),
            "raw": arr["raw_actions"].ravel(),
            "log_prob": arr["log_probs"].ravel(),
            "adv": normalize_advantages(adv.ravel()),
            "ret": ret.ravel(),
        }
        return ppo_update(self, data, rng)


def ppo_update(agent: Agent, data: dict, rng: np.random.Generator) -> UpdateDiagnostics:
    cfg = agent.cfg
    params = agent.params()
    backup = {k: v.copy() for k, v in params.items()}
    opt_backup = (agent.opt.t, {k: v.copy() for k, v in agent.opt.m.items()},
                  {k: v.copy() for k, v in agent.opt.v.items()})
    n = data["obs"].shape[0]
    infos = []
    norms = []
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            mb = {k: v[idx] for k, v in data.items()}
            loss, grads, info = ppo_loss_and_grads(agent.policy, agent.critic, mb, cfg)
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                for k, v in backup.items():
                    params[k][...] = v
                agent.opt.t, agent.opt.m, agent.opt.v = opt_backup
                return UpdateDiagnostics(float("nan"), float("nan"), float("nan"), float("nan"),
                                         float("nan"), gnorm, rolled_back=True)
            if gnorm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            agent.opt.step(params, grads)
            infos.append(info)
            norms.append(gnorm)
    agent.updates += 1
    return UpdateDiagnostics(
        mean_ratio=float(np.mean([i["ratio"] for i in infos])),
        clip_fraction=float(np.mean([i["clip_fraction"] for i in infos])),
        policy_loss=float(np.mean([i["policy_loss"] for i in infos])),
        value_loss=float(np.mean([i["value_loss"] for i in infos])),
        entropy=float(np.mean([i["entropy"] for i in infos])),
        grad_norm=float(np.mean(norms)),
    )


# --- checkpoints ------------------------------------------------------------

def _tensor_layout(agent: Agent) -> list[tuple[str, tuple[int, ...]]]:
    layout = [(k, v.shape) for k, v in agent.params().items()]
    for k, v in agent.params().items():
        layout.append((f"adam.m.{k}", v.shape))
        layout.append((f"adam.v.{k}", v.shape))
    return layout


def save_checkpoint(agent: Agent, path, extra: dict | None = None) -> None:
    """Header, JSON config block, then little-endian f64 tensors and a CRC32."""
    params = agent.params()
    layout = _tensor_layout(agent)
    block = {
        "n_in": agent.n_in,
        "ppo": asdict(agent.cfg),
        "updates": agent.updates,
        "adam_t": agent.opt.t,
        "tensors": [[k, list(s)] for k, s in layout],
        "extra": extra or {},
    }
    blob = json.dumps(block, sort_keys=True).encode()
    chunks = []
    for k, shape in layout:
        if k.startswith("adam."):
            _, which, name = k.split(".", 2)
            store = agent.opt.m if which == "m" else agent.opt.v
            arr = store.get(name, np.zeros(shape))
        else:
            arr = params[k]
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(chunks)
    head = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob
    with open(path, "wb") as fh:
        fh.write(head + body + struct.pack("<I", zlib.crc32(head + body)))


def load_checkpoint(path) -> tuple[Agent, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint or truncated header")
    version, blen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if 12 + blen + 4 > len(data):
        raise CheckpointError("checkpoint truncated")
    try:
        block = json.loads(data[12:12 + blen])
    except ValueError as exc:
        raise CheckpointError("corrupt checkpoint config block") from exc
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated)")
    known = {f.name for f in fields(PpoConfig)}
    cfg = PpoConfig(**{k: v for k, v in block["ppo"].items() if k in known})
    agent = Agent(block["n_in"], cfg)
    agent.updates = block["updates"]
    agent.opt.t = block["adam_t"]
    params = agent.params()
    off = 12 + blen
    for name, shape in block["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data) - 4:
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
        if name.startswith("adam."):
            _, which, key = name.split(".", 2)
            (agent.opt.m if which == "m" else agent.opt.v)[key] = arr
        else:
            params[name][...] = arr
    if off != len(data) - 4:
        raise CheckpointError("checkpoint has trailing bytes")
    return agent, block.get("extra", {})
