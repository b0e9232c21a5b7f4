"""Compiled D2Q9 kernels.

Distribution layout is ``f[q, y, x]`` (C order).  Lattice directions::

    6   2   5
      \\ | /
    3 - 0 - 1
      / | \\
    7   4   8

Cell types: 0 fluid, 1 solid, 2 skipped (slip ghost rows, inlet/outlet columns).
The state array always holds post-collision populations.  Before streaming,
every fluid->solid link writes the reflected population into the solid
neighbour, so the fused pull-stream-collide pass needs no special cases.
"""

import numpy as np
from numba import njit

CX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1], dtype=np.int64)
CY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1], dtype=np.int64)
W = np.array([4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36])
OPP = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)

# no nnan/ninf: the divergence check relies on NaN comparisons
_FM = {"contract", "arcp", "nsz", "reassoc"}

FLUID, SOLID, SKIP = 0, 1, 2


@njit(cache=True, fastmath=_FM)
def equilibrium(rho, ux, uy, out):
    usq = 1.5 * (ux * ux + uy * uy)
    for q in range(9):
        cu = 3.0 * (CX[q] * ux + CY[q] * uy)
        out[q] = W[q] * rho * (1.0 + cu + 0.5 * cu * cu - usq)


@njit(cache=True, fastmath=_FM)
def link_pass(f, lx, ly, lq, lkind, ldelta, lx2, ly2, ljet, lnx, lny, jet_amp, write):
    """Reflected populations for all boundary links; returns momentum-exchange force."""
    fx = 0.0
    fy = 0.0
    for k in range(lx.shape[0]):
        x = lx[k]
        y = ly[k]
        q = lq[k]
        qb = OPP[q]
        fq = f[q, y, x]
        kind = lkind[k]
        if kind == 1:
            d2 = 2.0 * ldelta[k]
            val = d2 * fq + (1.0 - d2) * f[q, ly2[k], lx2[k]]
        elif kind == 2:
            d2 = 2.0 * ldelta[k]
            val = fq / d2 + (d2 - 1.0) / d2 * f[qb, y, x]
        else:
            val = fq
        j = ljet[k]
        if j >= 0:
            a = jet_amp[j]
            # moving-wall correction with reference density 1
            val += 6.0 * W[q] * a * (CX[qb] * lnx[k] + CY[qb] * lny[k])
        fx += CX[q] * (fq + val)
        fy += CY[q] * (fq + val)
        if write:
            f[qb, y + CY[q], x + CX[q]] = val
    return fx, fy


@njit(cache=True, fastmath=_FM)
def _fill_slip_rows(f):
    ny = f.shape[1]
    nx = f.shape[2]
    for x in range(nx):
        f[2, 0, x] = f[4, 1, x]
        f[5, 0, x] = f[8, 1, x]
        f[6, 0, x] = f[7, 1, x]
        f[4, ny - 1, x] = f[2, ny - 2, x]
        f[7, ny - 1, x] = f[6, ny - 2, x]
        f[8, ny - 1, x] = f[5, ny - 2, x]


@njit(cache=True, fastmath=_FM)
def _stream_collide(a, b, ctype, omega):
    ny = a.shape[1]
    nx = a.shape[2]
    umax2 = 0.0
    rhomin = 1.0e300
    for y in range(ny):
        yn = y + 1 if y + 1 < ny else 0
        ys = y - 1 if y > 0 else ny - 1
        for x in range(nx):
            if ctype[y, x] != FLUID:
                continue
            xe = x + 1 if x + 1 < nx else 0
            xw = x - 1 if x > 0 else nx - 1
            f0 = a[0, y, x]
            f1 = a[1, y, xw]
            f2 = a[2, ys, x]
            f3 = a[3, y, xe]
            f4 = a[4, yn, x]
            f5 = a[5, ys, xw]
            f6 = a[6, ys, xe]
            f7 = a[7, yn, xe]
            f8 = a[8, yn, xw]
            rho = f0 + f1 + f2 + f3 + f4 + f5 + f6 + f7 + f8
            ux = (f1 + f5 + f8 - f3 - f6 - f7) / rho
            uy = (f2 + f5 + f6 - f4 - f7 - f8) / rho
            u2 = ux * ux + uy * uy
            if not (u2 <= umax2):
                umax2 = u2
            if not (rho >= rhomin):
                rhomin = rho
            usq = 1.5 * u2
            wa = 4.0 / 9.0 * rho
            wb = rho / 9.0
            wc = rho / 36.0
            b[0, y, x] = f0 + omega * (wa * (1.0 - usq) - f0)
            cu = 3.0 * ux
            b[1, y, x] = f1 + omega * (wb * (1.0 + cu + 0.5 * cu * cu - usq) - f1)
            cu = 3.0 * uy
            b[2, y, x] = f2 + omega * (wb * (1.0 + cu + 0.5 * cu * cu - usq) - f2)
            cu = -3.0 * ux
            b[3, y, x] = f3 + omega * (wb * (1.0 + cu + 0.5 * cu * cu - usq) - f3)
            cu = -3.0 * uy
            b[4, y, x] = f4 + omega * (wb * (1.0 + cu + 0.5 * cu * cu - usq) - f4)
            cu = 3.0 * (ux + uy)
            b[5, y, x] = f5 + omega * (wc * (1.0 + cu + 0.5 * cu * cu - usq) - f5)
            cu = 3.0 * (uy - ux)
            b[6, y, x] = f6 + omega * (wc * (1.0 + cu + 0.5 * cu * cu - usq) - f6)
            cu = -3.0 * (ux + uy)
            b[7, y, x] = f7 + omega * (wc * (1.0 + cu + 0.5 * cu * cu - usq) - f7)
            cu = 3.0 * (ux - uy)
            b[8, y, x] = f8 + omega * (wc * (1.0 + cu + 0.5 * cu * cu - usq) - f8)
    return umax2, rhomin


@njit(cache=True, fastmath=_FM)
def _moments(b, y, x):
    rho = 0.0
    jx = 0.0
    jy = 0.0
    for q in range(9):
        v = b[q, y, x]
        rho += v
        jx += CX[q] * v
        jy += CY[q] * v
    return rho, jx / rho, jy / rho


@njit(cache=True, fastmath=_FM)
def _open_boundaries(b, ctype, u_in):
    """Velocity inlet and unit-density outlet by non-equilibrium extrapolation."""
    nx = b.shape[2]
    fa = np.empty(9)
    fb = np.empty(9)
    for y in range(b.shape[1]):
        if ctype[y, 1] != FLUID:
            continue
        rho, ux, uy = _moments(b, y, 1)
        equilibrium(rho, u_in, 0.0, fa)
        equilibrium(rho, ux, uy, fb)
        for q in range(9):
            b[q, y, 0] = fa[q] + b[q, y, 1] - fb[q]
        rho, ux, uy = _moments(b, y, nx - 2)
        equilibrium(1.0, ux, uy, fa)
        equilibrium(rho, ux, uy, fb)
        for q in range(9):
            b[q, y, nx - 1] = fa[q] + b[q, y, nx - 2] - fb[q]


@njit(cache=True, fastmath=_FM)
def _sponge(b, sx, sy, ss, u_in):
    """Blend populations towards the free-stream equilibrium (absorbs acoustics)."""
    feq = np.empty(9)
    equilibrium(1.0, u_in, 0.0, feq)
    for k in range(sx.shape[0]):
        x = sx[k]
        y = sy[k]
        s = ss[k]
        for q in range(9):
            b[q, y, x] -= s * (b[q, y, x] - feq[q])


@njit(cache=True, fastmath=_FM)
def advance(a, b, ctype, omega, u_in, inflow, slip,
            lx, ly, lq, lkind, ldelta, lx2, ly2, ljet, lnx, lny,
            sx, sy, ss, jet_amp, forces):
    """Run ``jet_amp.shape[0]`` substeps, ping-ponging between ``a`` and ``b``.

    Returns ``(diverged_at, swapped)``; ``diverged_at`` is -1 on success and
    ``swapped`` tells whether the final state lives in ``b``.
    """
    n = jet_amp.shape[0]
    swapped = False
    for k in range(n):
        if slip:
            _fill_slip_rows(a)
        fx, fy = link_pass(a, lx, ly, lq, lkind, ldelta, lx2, ly2, ljet, lnx, lny,
                           jet_amp[k], True)
        forces[k, 0] = fx
        forces[k, 1] = fy
        umax2, rhomin = _stream_collide(a, b, ctype, omega)
        if sx.shape[0]:
            _sponge(b, sx, sy, ss, u_in)
        if inflow:
            _open_boundaries(b, ctype, u_in)
        a, b = b, a
        swapped = not swapped
        if not (umax2 < 1.0 / 3.0) or not (rhomin > 0.0):
            return k, swapped
    return -1, swapped
