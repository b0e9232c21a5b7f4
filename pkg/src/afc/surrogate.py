"""Ring of coupled Stuart-Landau oscillators standing in for spanwise shedding strips.

Each strip obeys

    dA/dt = (sigma + i omega) A - ell |A|^2 A + kappa (A[i-1] + A[i+1] - 2 A) + g u

and reports synthetic coefficients ``cd = cd0 + c1 |A|^2`` and ``cl = c2 Re(A)``.
Time is in convective units (chord = inflow speed = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lbm import ConfigError


@dataclass
class SurrogateConfig:
    sigma: float = 0.1
    ell: float = 0.1
    omega: float = 2 * math.pi * 0.2
    kappa: float = 0.05
    gain: float = 0.1
    cd0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    dt: float = 0.05
    phase_step: float = 0.9

    def validate(self) -> "SurrogateConfig":
        if self.ell <= 0:
            raise ConfigError("surrogate nonlinearity ell must be positive")
        if self.kappa < 0:
            raise ConfigError("surrogate coupling kappa must be non-negative")
        if not self.dt * abs(self.omega) < 0.1:
            raise ConfigError("surrogate dt * omega must stay below 0.1")
        return self


def _rhs(a, u, cfg: SurrogateConfig):
    coupling = np.roll(a, 1) + np.roll(a, -1) - 2.0 * a
    return (cfg.sigma + 1j * cfg.omega) * a - cfg.ell * (a.real**2 + a.imag**2) * a \
        + cfg.kappa * coupling + cfg.gain * u


def step_surrogate(strips: np.ndarray, actions, dt: float, n_substeps: int = 1,
                   cfg: SurrogateConfig | None = None) -> np.ndarray:
    """Classical RK4 with the forcing held constant over each substep."""
    cfg = cfg or SurrogateConfig()
    a = np.asarray(strips, dtype=complex).copy()
    u = np.broadcast_to(np.asarray(actions, dtype=float), a.shape)
    for _ in range(n_substeps):
        k1 = _rhs(a, u, cfg)
        k2 = _rhs(a + 0.5 * dt * k1, u, cfg)
        k3 = _rhs(a + 0.5 * dt * k2, u, cfg)
        k4 = _rhs(a + dt * k3, u, cfg)
        a = a + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return a


def surrogate_probes(strips: np.ndarray, i: int, n_probes: int) -> np.ndarray:
    """Replicate ``(Re A, Im A, |A|^2)`` of strip ``i`` to width ``n_probes``."""
    a = complex(strips[i])
    feats = np.array([a.real, a.imag, a.real**2 + a.imag**2])
    return feats[np.arange(n_probes) % 3]


def synthetic_coefficients(strips: np.ndarray, cfg: SurrogateConfig):
    a = np.asarray(strips)
    return cfg.cd0 + cfg.c1 * np.abs(a) ** 2, cfg.c2 * a.real


class SurrogateEnv:
    kind = "surrogate"

    def __init__(self, cfg: SurrogateConfig, n_jets: int = 3, n_probes: int = 32):
        self.cfg = cfg.validate()
        if n_jets < 1:
            raise ConfigError("n_jets must be >= 1")
        self.n_jets = n_jets
        self.n_probes = n_probes
        self.dt = cfg.dt
        radius = math.sqrt(max(cfg.sigma, 0.0) / cfg.ell) or 1.0
        self.strips = radius * np.exp(1j * cfg.phase_step * np.arange(n_jets))
        self.step_count = 0

    @property
    def time(self) -> float:
        return self.step_count * self.dt

    def snapshot(self):
        return self.strips.copy(), self.step_count

    def restore(self, state) -> None:
        self.strips, self.step_count = state[0].copy(), int(state[1])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.save(fh, np.concatenate([[self.step_count], self.strips.real, self.strips.imag]))

    def load(self, path):
        raw = np.load(path)
        n = (raw.shape[0] - 1) // 2
        if n != self.n_jets:
            raise ConfigError("surrogate snapshot has a different strip count")
        return raw[1:1 + n] + 1j * raw[1 + n:], int(raw[0])

    def observe(self) -> np.ndarray:
        return np.stack([surrogate_probes(self.strips, i, self.n_probes) for i in range(self.n_jets)])

    def advance(self, amplitudes: np.ndarray):
        amps = np.asarray(amplitudes, dtype=float).reshape(-1, self.n_jets)
        cd = np.empty(amps.shape)
        cl = np.empty(amps.shape)
        for k in range(amps.shape[0]):
            self.strips = step_surrogate(self.strips, amps[k], self.dt, 1, self.cfg)
            cd[k], cl[k] = synthetic_coefficients(self.strips, self.cfg)
        self.step_count += amps.shape[0]
        return cd, cl

    def jet_fluxes(self, amplitudes: np.ndarray) -> np.ndarray:
        """Abstract pair fluxes (front, rear) per strip: rear is the negated front."""
        amps = np.asarray(amplitudes, dtype=float).reshape(-1, self.n_jets)
        out = np.empty((amps.shape[0], 2 * self.n_jets))
        out[:, 0::2] = amps
        out[:, 1::2] = -amps
        return out
