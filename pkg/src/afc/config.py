"""Run configuration and its INI file form.

Sections are named after the modules they configure::

    [cli]            environment, seed, out, episodes, ... (run-level knobs)
    [lbm-flow]       lattice flow constants
    [surrogate-env]  oscillator-ring constants
    [marl-harness]   topology, reward weights, episode schedule
    [ppo-agent]      learner hyperparameters
    [exchange-bus]   endpoint and blocking-read timeout

Unknown sections or keys are rejected.  ``RunConfig.to_ini`` writes the fully
resolved configuration, which is what every run directory stores.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .lbm import ConfigError, FlowConfig, FlowEnv
from .marl import PseudoEnvTopology, RewardWeights
from .ppo import PpoConfig
from .surrogate import SurrogateConfig, SurrogateEnv


@dataclass
class CliSection:
    environment: str = "surrogate"
    seed: int = 0
    out: str = "runs/default"
    episodes: int = 200
    checkpoint_every: int = 10
    plateau_window: int = 10
    plateau_span: int = 20
    plateau_tolerance: float = 0.01
    transient_units: float = 20.0
    measure_units: float = 40.0
    eval_units: float = 40.0
    eval_discard_units: float = 20.0


@dataclass
class FlowSection:
    reynolds: float = 100.0
    inflow_speed_lattice: float = 0.1
    chord_cells: int = 64
    aoa_deg: float = 0.0
    obstacle_kind: str = "cylinder"
    upstream_chords: float = 2.0
    domain_length_chords: float = 8.0
    domain_height_chords: float = 4.0
    x_boundary: str = "inflow"
    y_boundary: str = "slip"
    kick: float = 1.0
    sponge: float = 0.05
    wall_scheme: str = "interpolated"

    def build(self, n_probes: int) -> FlowConfig:
        return FlowConfig(
            reynolds=self.reynolds, inflow_speed_lattice=self.inflow_speed_lattice,
            chord_cells=self.chord_cells, aoa_deg=self.aoa_deg, obstacle_kind=self.obstacle_kind,
            upstream_chords=self.upstream_chords,
            domain_chords=(self.domain_length_chords, self.domain_height_chords),
            x_boundary=self.x_boundary, y_boundary=self.y_boundary, n_probes=n_probes,
            kick=self.kick, sponge=self.sponge, wall_scheme=self.wall_scheme)


@dataclass
class MarlSection:
    n_sims: int = 4
    n_jets: int = 3
    n_probes: int = 32
    alpha: float = 0.3
    beta: float = 0.8
    n_actions: int = 120
    shedding_cycles: float = 6.0
    smoothing_rate: float = 5.0
    stats_window: float = 5.0


@dataclass
class BusSection:
    endpoint: str = "inproc"
    timeout: float = 600.0


SECTIONS = {
    "cli": ("cli", CliSection),
    "lbm-flow": ("flow", FlowSection),
    "surrogate-env": ("surrogate", SurrogateConfig),
    "marl-harness": ("marl", MarlSection),
    "ppo-agent": ("ppo", PpoConfig),
    "exchange-bus": ("bus", BusSection),
}


@dataclass
class RunConfig:
    cli: CliSection = field(default_factory=CliSection)
    flow: FlowSection = field(default_factory=FlowSection)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    marl: MarlSection = field(default_factory=MarlSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bus: BusSection = field(default_factory=BusSection)

    # derived views

    @property
    def topology(self) -> PseudoEnvTopology:
        return PseudoEnvTopology(self.marl.n_jets)

    @property
    def weights(self) -> RewardWeights:
        return RewardWeights(self.marl.alpha, self.marl.beta)

    def flow_config(self) -> FlowConfig:
        return self.flow.build(self.marl.n_probes)

    def validate(self) -> "RunConfig":
        env = self.cli.environment
        if env not in ("surrogate", "flow"):
            raise ConfigError(f"environment must be surrogate or flow, not {env!r}")
        m = self.marl
        if m.n_sims < 1 or m.n_jets < 1 or m.n_probes < 1 or m.n_actions < 1:
            raise ConfigError("n_sims, n_jets, n_probes and n_actions must be positive")
        if env == "flow" and m.n_jets != 1:
            raise ConfigError("the 2D flow environment has exactly one pseudo-environment (n_jets = 1)")
        if self.cli.episodes < 0 or self.cli.checkpoint_every < 1:
            raise ConfigError("episodes must be >= 0 and checkpoint_every >= 1")
        if not 0 <= self.cli.eval_discard_units < self.cli.eval_units:
            raise ConfigError("eval_discard_units must lie in [0, eval_units)")
        if self.cli.measure_units <= 0 or self.cli.transient_units < 0:
            raise ConfigError("measure_units must be positive and transient_units non-negative")
        if self.bus.timeout <= 0:
            raise ConfigError("bus timeout must be positive")
        self.weights  # range checks
        self.ppo.validate()
        if env == "flow":
            self.flow_config().validate()
        else:
            self.surrogate.validate()
        return self

    def make_env(self):
        if self.cli.environment == "flow":
            return FlowEnv(self.flow_config(), self.marl.n_jets)
        return SurrogateEnv(self.surrogate, self.marl.n_jets, self.marl.n_probes)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name, (attr, _) in SECTIONS.items():
            sec = getattr(self, attr)
            cp[name] = {f.name: repr(getattr(sec, f.name)) if isinstance(getattr(sec, f.name), float)
                        else str(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _convert(raw: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw.strip()


def parse_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    cfg = base or RunConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        attr, _ = SECTIONS[name]
        sec = getattr(cfg, attr)
        known = {f.name: getattr(sec, f.name) for f in dataclasses.fields(sec)}
        updates = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            updates[key] = _convert(raw, known[key], f"{name}.{key}")
        setattr(cfg, attr, dataclasses.replace(sec, **updates))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_ini(text)
