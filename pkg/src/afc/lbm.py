"""Desk-scale 2D flow environment on a D2Q9 BGK lattice.

A circular cylinder or a NACA0012 section (at angle of attack) sits in a
channel with a constant-velocity inlet, a unit-density outlet (both by
non-equilibrium extrapolation), free-slip lateral walls and thin sponge
layers that relax toward the free stream near the outlet and walls.  Solid walls use interpolated (link-fraction) bounce-back with
half-way bounce-back as fallback; jet arcs are moving-wall half-way links.
Forces come from momentum exchange over the fluid->solid links.

Units: lattice spacing and step are 1, reference density is 1.  One
convective time unit is ``chord_cells / inflow_speed_lattice`` steps.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K

CS2 = 1.0 / 3.0
AMPLITUDE_BOUND = 1.125

SNAPSHOT_MAGIC = b"AFCS"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sIIIQ")


class ConfigError(ValueError):
    pass


class FlowDiverged(RuntimeError):
    def __init__(self, step_index: int):
        super().__init__(f"lattice diverged at step {step_index}")
        self.step_index = step_index


class SnapshotError(ValueError):
    pass


@dataclass(frozen=True)
class JetPairGeometry:
    """Front/rear jet arcs, located by chordwise position on a given side.

    ``side`` is +1 for the upper (suction at positive incidence) surface and -1
    for the lower one.  ``width`` is the arc length in chords.
    """

    front_xc: float = 0.01
    rear_xc: float = 0.4
    front_side: int = 1
    rear_side: int = 1
    width: float = 0.08


# Opposed top/bottom slots for the cylinder, in the spirit of the classic
# 2D cylinder control set-ups.
CYLINDER_JETS = JetPairGeometry(front_xc=0.5, rear_xc=0.5, front_side=1, rear_side=-1, width=0.1)
NACA_JETS = JetPairGeometry()


@dataclass
class FlowConfig:
    reynolds: float = 100.0
    inflow_speed_lattice: float = 0.1
    chord_cells: int = 64
    nx: int = 0
    ny: int = 0
    aoa_deg: float = 0.0
    obstacle_kind: str = "cylinder"
    jet_defs: tuple[JetPairGeometry, ...] = ()
    upstream_chords: float = 2.0
    domain_chords: tuple[float, float] = (8.0, 4.0)
    x_boundary: str = "inflow"
    y_boundary: str = "slip"
    n_probes: int = 32
    kick: float = 1.0
    sponge: float = 0.05
    wall_scheme: str = "interpolated"

    def __post_init__(self):
        if self.nx <= 0:
            self.nx = int(round(self.domain_chords[0] * self.chord_cells))
        if self.ny <= 0:
            ny = int(round(self.domain_chords[1] * self.chord_cells)) + 2
            self.ny = ny + (ny % 2)
        self.jet_defs = tuple(self.jet_defs)

    @property
    def viscosity(self) -> float:
        return self.inflow_speed_lattice * self.chord_cells / self.reynolds

    @property
    def tau(self) -> float:
        return 0.5 + self.viscosity / CS2

    @property
    def ref_surface(self) -> float:
        # chord times unit depth
        return float(self.chord_cells)

    @property
    def steps_per_unit(self) -> float:
        return self.chord_cells / self.inflow_speed_lattice

    @property
    def center(self) -> tuple[float, float]:
        """Chord centre (cylinder centre) in lattice coordinates."""
        return (self.upstream_chords + 0.5) * self.chord_cells, (self.ny - 1) / 2.0

    def validate(self) -> "FlowConfig":
        if self.obstacle_kind not in ("cylinder", "naca0012", "none"):
            raise ConfigError(f"unknown obstacle_kind {self.obstacle_kind!r}")
        if not 0.0 < self.inflow_speed_lattice <= 0.15:
            raise ConfigError("inflow_speed_lattice must lie in (0, 0.15]")
        if self.reynolds <= 0:
            raise ConfigError("reynolds must be positive")
        if self.chord_cells < 32:
            raise ConfigError("chord_cells must be >= 32")
        if self.tau <= 0.5:
            raise ConfigError(f"relaxation time {self.tau:.4f} must exceed 0.5")
        if self.wall_scheme not in ("interpolated", "halfway"):
            raise ConfigError("wall_scheme must be interpolated or halfway")
        if self.x_boundary not in ("inflow", "periodic") or self.y_boundary not in ("slip", "periodic"):
            raise ConfigError("boundary modes are x: inflow|periodic, y: slip|periodic")
        if self.obstacle_kind != "none" and self.upstream_chords < 2.0:
            raise ConfigError("obstacle needs at least 2 chords of upstream margin")
        if self.n_probes < 1:
            raise ConfigError("n_probes must be >= 1")
        return self


# --- geometry ---------------------------------------------------------------

_NACA_T = 0.12


def naca_thickness(xc):
    xc = np.clip(xc, 0.0, 1.0)
    return 5 * _NACA_T * (0.2969 * np.sqrt(xc) - 0.1260 * xc - 0.3516 * xc**2
                          + 0.2843 * xc**3 - 0.1036 * xc**4)


def naca_slope(xc):
    xc = np.clip(xc, 1e-6, 1.0)
    return 5 * _NACA_T * (0.5 * 0.2969 / np.sqrt(xc) - 0.1260 - 2 * 0.3516 * xc
                          + 3 * 0.2843 * xc**2 - 4 * 0.1036 * xc**3)


def circle_thickness(xc):
    xc = np.clip(xc, 0.0, 1.0)
    return np.sqrt(np.maximum(xc - xc * xc, 0.0))


class _Shape:
    """Analytic body in its own frame: leading edge at the origin, chord along +x."""

    def __init__(self, config: FlowConfig):
        self.kind = config.obstacle_kind
        self.c = float(config.chord_cells)
        self.xm, self.ym = config.center
        alpha = math.radians(config.aoa_deg) if self.kind == "naca0012" else 0.0
        self.ca, self.sa = math.cos(alpha), math.sin(alpha)
        self.thickness = naca_thickness if self.kind == "naca0012" else circle_thickness

    def to_local(self, x, y):
        dx = np.asarray(x, dtype=float) - self.xm
        dy = np.asarray(y, dtype=float) - self.ym
        xl = dx * self.ca - dy * self.sa + 0.5 * self.c
        yl = dx * self.sa + dy * self.ca
        return xl, yl

    def to_global(self, xl, yl):
        ox = np.asarray(xl, dtype=float) - 0.5 * self.c
        return (self.xm + ox * self.ca + yl * self.sa,
                self.ym - ox * self.sa + yl * self.ca)

    def inside(self, x, y):
        xl, yl = self.to_local(x, y)
        if self.kind == "cylinder":
            r = 0.5 * self.c
            return (xl - r) ** 2 + yl**2 <= r * r
        xc = xl / self.c
        return (xc >= 0.0) & (xc <= 1.0) & (np.abs(yl) <= self.c * self.thickness(xc))

    def surface_coords(self, x, y):
        """Chordwise position and side of points on (or near) the surface."""
        xl, yl = self.to_local(x, y)
        return np.clip(xl / self.c, 0.0, 1.0), np.where(yl >= 0.0, 1, -1)

    def normal(self, x, y):
        xl, yl = self.to_local(x, y)
        side = np.where(yl >= 0.0, 1.0, -1.0)
        if self.kind == "cylinder":
            nlx, nly = xl - 0.5 * self.c, yl
        else:
            nlx, nly = -naca_slope(xl / self.c), side
        norm = np.hypot(nlx, nly)
        nlx, nly = nlx / norm, nly / norm
        return nlx * self.ca + nly * self.sa, -nlx * self.sa + nly * self.ca


def _arc_table(thickness, n: int = 4001):
    """Cumulative arc length (chords) from the leading edge along one side."""
    xc = 0.5 * (1.0 - np.cos(np.linspace(0.0, math.pi, n)))
    yc = thickness(xc)
    s = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xc), np.diff(yc)))])
    return xc, s


@dataclass
class ObstacleMask:
    solid: np.ndarray
    ctype: np.ndarray
    link_x: np.ndarray
    link_y: np.ndarray
    link_q: np.ndarray
    link_delta: np.ndarray
    link_kind: np.ndarray
    link_x2: np.ndarray
    link_y2: np.ndarray
    link_jet: np.ndarray
    link_nx: np.ndarray
    link_ny: np.ndarray
    link_s: np.ndarray
    link_side: np.ndarray
    arc_xc: np.ndarray
    arc_s: np.ndarray
    jet_flux_factor: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sponge_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sponge_y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sponge_s: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_pairs(self) -> int:
        return self.jet_flux_factor.shape[0] // 2

    def jet_cells(self, jet: int) -> set[tuple[int, int]]:
        sel = self.link_jet == jet
        return set(zip(self.link_x[sel].tolist(), self.link_y[sel].tolist()))


def _cell_types(config: FlowConfig, solid: np.ndarray) -> np.ndarray:
    ctype = np.where(solid, K.SOLID, K.FLUID).astype(np.int8)
    if config.y_boundary == "slip":
        ctype[0, :] = K.SKIP
        ctype[-1, :] = K.SKIP
    if config.x_boundary == "inflow":
        ctype[:, 0] = K.SKIP
        ctype[:, -1] = K.SKIP
    return ctype


def _sponge_cells(config: FlowConfig, ctype: np.ndarray):
    """Quadratically ramped absorbing layers along the open boundaries."""
    ny, nx = ctype.shape
    c = config.chord_cells
    strength = np.zeros((ny, nx))
    if config.x_boundary == "inflow" and config.sponge > 0:
        xx = np.arange(nx, dtype=float)
        for dist, width in ((nx - 1 - xx, 1.5 * c), (xx, 0.25 * c)):
            ramp = np.clip(1.0 - dist / width, 0.0, 1.0) ** 2
            strength = np.maximum(strength, config.sponge * ramp[None, :])
    if config.y_boundary == "slip" and config.sponge > 0:
        yy = np.arange(ny, dtype=float)
        dist = np.minimum(yy, ny - 1 - yy)
        ramp = np.clip(1.0 - dist / (0.5 * c), 0.0, 1.0) ** 2
        strength = np.maximum(strength, config.sponge * ramp[:, None])
    strength[ctype != K.FLUID] = 0.0
    sy, sx = np.nonzero(strength > 0.0)
    return sx.astype(np.int64), sy.astype(np.int64), strength[sy, sx]


def build_obstacle(config: FlowConfig) -> ObstacleMask:
    config.validate()
    ny, nx = config.ny, config.nx
    yy, xx = np.mgrid[0:ny, 0:nx]
    if config.obstacle_kind == "none":
        solid = np.zeros((ny, nx), dtype=bool)
        if config.jet_defs:
            raise ConfigError("jets need an obstacle")
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0)
        ctype = _cell_types(config, solid)
        return ObstacleMask(solid, ctype, empty_i, empty_i, empty_i,
                            empty_f, empty_i, empty_i, empty_i, empty_i, empty_f, empty_f,
                            empty_f, empty_i, empty_f, empty_f, empty_f, *_sponge_cells(config, ctype))

    shape = _Shape(config)
    solid = shape.inside(xx, yy)
    if not solid.any():
        raise ConfigError("obstacle resolves to no solid cells")
    sy, sx = np.nonzero(solid)
    margin = 3
    if sx.min() < margin or sx.max() > nx - 1 - margin or sy.min() < margin or sy.max() > ny - 1 - margin:
        raise ConfigError("obstacle does not fit in the grid")
    ctype = _cell_types(config, solid)
    fluid = ctype == K.FLUID

    lx, ly, lq = [], [], []
    for q in range(1, 9):
        nb = np.roll(np.roll(solid, -K.CY[q], axis=0), -K.CX[q], axis=1)
        ys, xs = np.nonzero(fluid & nb)
        lx.append(xs)
        ly.append(ys)
        lq.append(np.full(xs.shape, q))
    lx = np.concatenate(lx).astype(np.int64)
    ly = np.concatenate(ly).astype(np.int64)
    lq = np.concatenate(lq).astype(np.int64)
    cx, cy = K.CX[lq].astype(float), K.CY[lq].astype(float)

    # wall-intersection fraction along each link by bisection on the analytic body
    lo, hi = np.zeros(lx.shape), np.ones(lx.shape)
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        ins = shape.inside(lx + mid * cx, ly + mid * cy)
        hi = np.where(ins, mid, hi)
        lo = np.where(ins, lo, mid)
    delta = 0.5 * (lo + hi)
    px, py = lx + delta * cx, ly + delta * cy

    x2, y2 = lx - K.CX[lq], ly - K.CY[lq]
    second_ok = (x2 >= 0) & (x2 < nx) & (y2 >= 0) & (y2 < ny)
    second_ok &= ctype[np.clip(y2, 0, ny - 1), np.clip(x2, 0, nx - 1)] == K.FLUID
    kind = np.where(delta >= 0.5, 2, np.where(second_ok, 1, 0)).astype(np.int64)
    if config.wall_scheme == "halfway":
        kind[:] = 0

    arc_xc, arc_s = _arc_table(shape.thickness)
    xc, side = shape.surface_coords(px, py)
    s = np.interp(xc, arc_xc, arc_s)
    nrm_x, nrm_y = shape.normal(px, py)

    jet = np.full(lx.shape, -1, dtype=np.int64)
    flux = np.zeros(2 * len(config.jet_defs))
    for p, geo in enumerate(config.jet_defs):
        for r, (pos, sd) in enumerate(((geo.front_xc, geo.front_side), (geo.rear_xc, geo.rear_side))):
            center = np.interp(pos, arc_xc, arc_s)
            sel = (side == sd) & (np.abs(s - center) <= 0.5 * geo.width) & (jet < 0)
            j = 2 * p + r
            jet[sel] = j
            cells = set(zip(lx[sel].tolist(), ly[sel].tolist()))
            if len(cells) < 3:
                raise ConfigError(f"jet arc {j} resolves to {len(cells)} boundary cells (< 3)")
            qb = K.OPP[lq[sel]]
            flux[j] = np.sum(6.0 * K.W[lq[sel]] * (K.CX[qb] * nrm_x[sel] + K.CY[qb] * nrm_y[sel]))
            if flux[j] <= 0.0:
                raise ConfigError(f"jet arc {j} has no net outward flux")
    kind[jet >= 0] = 0

    return ObstacleMask(
        solid=solid, ctype=ctype, link_x=lx, link_y=ly, link_q=lq, link_delta=delta,
        link_kind=kind, link_x2=np.where(kind == 1, x2, lx), link_y2=np.where(kind == 1, y2, ly),
        link_jet=jet, link_nx=nrm_x, link_ny=nrm_y, link_s=s, link_side=side,
        arc_xc=arc_xc, arc_s=arc_s, jet_flux_factor=flux,
        **dict(zip(("sponge_x", "sponge_y", "sponge_s"), _sponge_cells(config, ctype))),
    )


# --- lattice state ----------------------------------------------------------

@dataclass
class Lattice:
    f: np.ndarray
    step_count: int = 0
    _scratch: np.ndarray | None = field(default=None, repr=False)

    @property
    def rho(self) -> np.ndarray:
        return self.f.sum(axis=0)

    @property
    def u(self) -> np.ndarray:
        rho = self.rho
        ux = np.tensordot(K.CX.astype(float), self.f, axes=1) / rho
        uy = np.tensordot(K.CY.astype(float), self.f, axes=1) / rho
        return np.stack([ux, uy])

    def copy(self) -> "Lattice":
        return Lattice(self.f.copy(), self.step_count)


def equilibrium_field(rho, ux, uy) -> np.ndarray:
    cu = 3.0 * (K.CX[:, None, None] * ux + K.CY[:, None, None] * uy)
    usq = 1.5 * (ux * ux + uy * uy)
    return K.W[:, None, None] * rho * (1.0 + cu + 0.5 * cu * cu - usq)


def init_lattice(config: FlowConfig, mask: ObstacleMask, *, at_rest: bool = False) -> Lattice:
    """Uniform equilibrium, optionally with a transverse kick to trigger shedding."""
    ny, nx = config.ny, config.nx
    u0 = 0.0 if at_rest else config.inflow_speed_lattice
    ux = np.full((ny, nx), u0)
    uy = np.zeros((ny, nx))
    if not at_rest and config.kick and config.obstacle_kind != "none":
        yy, xx = np.mgrid[0:ny, 0:nx]
        xm, ym = config.center
        c = config.chord_cells
        bump = np.exp(-((xx - xm - 1.5 * c) ** 2 + (yy - ym - 0.25 * c) ** 2) / (0.5 * c) ** 2)
        uy += config.kick * config.inflow_speed_lattice * bump
    ux[mask.solid] = 0.0
    uy[mask.solid] = 0.0
    return Lattice(equilibrium_field(np.ones((ny, nx)), ux, uy))


def pair_amplitudes(mask: ObstacleMask, front: np.ndarray, u_inf: float) -> np.ndarray:
    """Lattice wall speeds for every jet given dimensionless front amplitudes.

    The rear jet carries the opposite sign.  Both magnitudes are scaled by the
    smaller arc flux factor so that the pair's discrete mass fluxes cancel and
    neither speed exceeds ``|front| * u_inf``.
    """
    front = np.atleast_2d(np.asarray(front, dtype=float))
    if np.any(np.abs(front) > AMPLITUDE_BOUND + 1e-12):
        raise ValueError(f"jet amplitude outside [-{AMPLITUDE_BOUND}, {AMPLITUDE_BOUND}]")
    kf = mask.jet_flux_factor[0::2]
    kr = mask.jet_flux_factor[1::2]
    kmin = np.minimum(kf, kr)
    out = np.empty((front.shape[0], 2 * mask.n_pairs))
    flux = front * u_inf * kmin
    out[:, 0::2] = flux / kf
    out[:, 1::2] = -flux / kr
    return out


def pair_mass_flux(mask: ObstacleMask, amps: np.ndarray) -> np.ndarray:
    """Imposed mass flux of each jet (lattice units, per step)."""
    return np.asarray(amps) * mask.jet_flux_factor


def step(lattice: Lattice, mask: ObstacleMask, config: FlowConfig, n_substeps: int = 1,
         front_amplitudes: np.ndarray | None = None, forces: np.ndarray | None = None) -> Lattice:
    """Advance ``n_substeps`` collide-and-stream steps in place.

    ``front_amplitudes`` has shape ``(n_substeps, n_pairs)`` in units of the
    inflow speed; each row is injected during the corresponding substep.
    Raw momentum-exchange forces per substep are written into ``forces``
    (shape ``(n_substeps, 2)``) when given.
    """
    n_pairs = mask.n_pairs
    if front_amplitudes is None:
        jet_amp = np.zeros((n_substeps, max(2 * n_pairs, 1)))
    else:
        fa = np.asarray(front_amplitudes, dtype=float).reshape(n_substeps, n_pairs)
        jet_amp = pair_amplitudes(mask, fa, config.inflow_speed_lattice)
    out = forces if forces is not None else np.empty((n_substeps, 2))
    if lattice._scratch is None or lattice._scratch.shape != lattice.f.shape:
        lattice._scratch = np.empty_like(lattice.f)
    bad, swapped = K.advance(
        lattice.f, lattice._scratch, mask.ctype, 1.0 / config.tau, config.inflow_speed_lattice,
        config.x_boundary == "inflow", config.y_boundary == "slip",
        mask.link_x, mask.link_y, mask.link_q, mask.link_kind, mask.link_delta,
        mask.link_x2, mask.link_y2, mask.link_jet, mask.link_nx, mask.link_ny,
        mask.sponge_x, mask.sponge_y, mask.sponge_s, jet_amp, out,
    )
    if swapped:
        lattice.f, lattice._scratch = lattice._scratch, lattice.f
    if bad >= 0:
        lattice.step_count += bad + 1
        raise FlowDiverged(lattice.step_count)
    lattice.step_count += n_substeps
    return lattice


def force_coefficients(config: FlowConfig, fx, fy):
    q = 0.5 * config.inflow_speed_lattice**2 * config.ref_surface
    return np.asarray(fx) / q, np.asarray(fy) / q


@dataclass(frozen=True)
class ForceSample:
    time: float
    cd: float
    cl: float


def compute_forces(lattice: Lattice, mask: ObstacleMask, config: FlowConfig,
                   front_amplitudes: Sequence[float] | None = None) -> ForceSample:
    """Momentum-exchange force the current state transfers on the next stream."""
    if not np.isfinite(lattice.f).all():
        raise FlowDiverged(lattice.step_count)
    n_pairs = mask.n_pairs
    if front_amplitudes is None or n_pairs == 0:
        amps = np.zeros(max(2 * n_pairs, 1))
    else:
        amps = pair_amplitudes(mask, np.asarray(front_amplitudes)[None, :], config.inflow_speed_lattice)[0]
    fx, fy = K.link_pass(lattice.f, mask.link_x, mask.link_y, mask.link_q, mask.link_kind,
                         mask.link_delta, mask.link_x2, mask.link_y2, mask.link_jet,
                         mask.link_nx, mask.link_ny, amps, False)
    cd, cl = force_coefficients(config, fx, fy)
    return ForceSample(lattice.step_count / config.steps_per_unit, float(cd), float(cl))


# --- probes -----------------------------------------------------------------

@dataclass(frozen=True)
class ProbeSet:
    ix: np.ndarray
    iy: np.ndarray

    @property
    def n_probes(self) -> int:
        return self.ix.shape[0]


def build_probes(config: FlowConfig, mask: ObstacleMask) -> ProbeSet:
    """Ring around the body plus a wake rake; deterministic and fluid-only."""
    n = config.n_probes
    c = config.chord_cells
    xm, ym = config.center
    n_ring = n // 3 if config.obstacle_kind != "none" else 0
    pts = []
    for k in range(n_ring):
        th = 2 * math.pi * k / n_ring
        pts.append((xm + 0.75 * c * math.cos(th), ym + 0.75 * c * math.sin(th)))
    n_rake = n - n_ring
    cols = min(4, n_rake)
    rows = math.ceil(n_rake / cols)
    rake = []
    for i in range(cols):
        for j in range(rows):
            fx = 1.0 + i * 0.6
            fy = -0.75 + 1.5 * (j + 0.5) / rows
            rake.append((xm + fx * c, ym + fy * c))
    pts.extend(rake[:n_rake])
    ix = np.clip(np.rint([p[0] for p in pts]).astype(np.int64), 1, config.nx - 2)
    iy = np.clip(np.rint([p[1] for p in pts]).astype(np.int64), 1, config.ny - 2)
    for k in range(n):
        # push off the body radially until the probe sits in a fluid cell
        r = 0
        while mask.ctype[iy[k], ix[k]] != K.FLUID:
            r += 1
            dx, dy = ix[k] - xm, iy[k] - ym
            nrm = math.hypot(dx, dy) or 1.0
            ix[k] = int(round(ix[k] + dx / nrm))
            iy[k] = int(round(iy[k] + dy / nrm))
            if r > c:
                raise ConfigError("cannot place probe in fluid")
    return ProbeSet(ix, iy)


def sample_probes(lattice: Lattice, probes: ProbeSet) -> np.ndarray:
    """Pressure proxy ``cs^2 (rho - 1)`` at each probe, fixed ordering."""
    rho = lattice.f[:, probes.iy, probes.ix].sum(axis=0)
    return CS2 * (rho - 1.0)


# --- files ------------------------------------------------------------------

def save_snapshot(lattice: Lattice, path) -> None:
    f = np.ascontiguousarray(lattice.f, dtype="<f8")
    _, ny, nx = f.shape
    with open(path, "wb") as fh:
        fh.write(_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, nx, ny, lattice.step_count))
        fh.write(f.tobytes())


def load_snapshot(path) -> Lattice:
    data = Path(path).read_bytes()
    if len(data) < _SNAP_HEADER.size:
        raise SnapshotError("snapshot truncated")
    magic, version, nx, ny, steps = _SNAP_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError("not a flow snapshot")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    body = data[_SNAP_HEADER.size:]
    if len(body) != 9 * nx * ny * 8:
        raise SnapshotError("snapshot truncated")
    f = np.frombuffer(body, dtype="<f8").reshape(9, ny, nx).astype(np.float64)
    return Lattice(f, steps)


def write_force_csv(path, t, cd, cl) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "cd", "cl"])
        for row in zip(t, cd, cl):
            w.writerow([repr(float(v)) for v in row])


# --- environment adapter ----------------------------------------------------

class FlowEnv:
    """Lattice flow behind the common environment interface.

    In 2D there is a single pseudo-environment: the body force is its force.
    Observations are probe pressures normalised by the dynamic pressure.
    """

    kind = "flow"

    def __init__(self, config: FlowConfig, n_jets: int = 1):
        if n_jets != 1:
            raise ConfigError("2D flow environment supports exactly one pseudo-environment")
        if not config.jet_defs and config.obstacle_kind != "none":
            default = CYLINDER_JETS if config.obstacle_kind == "cylinder" else NACA_JETS
            config.jet_defs = (default,)
        self.config = config.validate()
        self.n_jets = 1
        self.mask = build_obstacle(config)
        self.probes = build_probes(config, self.mask)
        self.n_probes = self.probes.n_probes
        self.lattice = init_lattice(config, self.mask)
        self.dt = 1.0 / config.steps_per_unit
        self._q = 0.5 * config.inflow_speed_lattice**2

    @property
    def time(self) -> float:
        return self.lattice.step_count * self.dt

    def snapshot(self) -> Lattice:
        return self.lattice.copy()

    def restore(self, state: Lattice) -> None:
        self.lattice = state.copy()

    def save(self, path) -> None:
        save_snapshot(self.lattice, path)

    def load(self, path) -> Lattice:
        lat = load_snapshot(path)
        if lat.f.shape != (9, self.config.ny, self.config.nx):
            raise SnapshotError("snapshot grid does not match config")
        return lat

    def observe(self) -> np.ndarray:
        return (sample_probes(self.lattice, self.probes) / self._q)[None, :]

    def advance(self, amplitudes: np.ndarray):
        """Run one substep per row of ``amplitudes`` (shape ``(n, n_jets)``).

        Returns ``(cd, cl)`` arrays of shape ``(n, n_jets)``.
        """
        amps = np.asarray(amplitudes, dtype=float).reshape(-1, 1)
        n = amps.shape[0]
        raw = np.empty((n, 2))
        if self.mask.n_pairs:
            step(self.lattice, self.mask, self.config, n, np.repeat(amps, self.mask.n_pairs, axis=1), raw)
        else:
            step(self.lattice, self.mask, self.config, n, None, raw)
        cd, cl = force_coefficients(self.config, raw[:, 0], raw[:, 1])
        return cd[:, None], cl[:, None]

    def jet_fluxes(self, amplitudes: np.ndarray) -> np.ndarray:
        """Imposed (front, rear) mass fluxes for each row of front amplitudes."""
        amps = np.asarray(amplitudes, dtype=float).reshape(-1, 1)
        lat = pair_amplitudes(self.mask, np.repeat(amps, self.mask.n_pairs, axis=1),
                              self.config.inflow_speed_lattice)
        return pair_mass_flux(self.mask, lat)
