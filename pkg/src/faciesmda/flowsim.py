"""Single-phase incompressible flow with unit-mobility tracer transport.

The forward model maps a facies grid to well data.  Pressure comes from a
5-point finite-volume discretization with harmonic transmissibilities and
Peaceman wells under bottom-hole-pressure control.  Injected water is a
passive tracer advected by first-order explicit upwinding.

Units: lengths in m, permeability in mD, viscosity in cP, pressure in bar,
time in days, rates in m^3/day.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .geomodel import FaciesGrid

__all__ = [
    "DARCY",
    "Well",
    "SimConfig",
    "PressureSolution",
    "PredictedData",
    "ConvergenceError",
    "conjugate_gradient",
    "permeability_from_facies",
    "solve_pressure",
    "TracerTransport",
    "advance_tracer",
    "simulate",
    "write_predicted_csv",
]

# m^3/day per (mD * m^2 / m * bar / cP)
DARCY = 9.869233e-16 * 1e5 / 1e-3 * 86400.0


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Well:
    name: str
    i: int
    j: int
    kind: str
    bhp: float

    def __post_init__(self):
        if self.kind not in ("producer", "injector"):
            raise ValueError(f"well {self.name}: kind must be producer or injector, got {self.kind!r}")


@dataclass(frozen=True)
class SimConfig:
    nx: int = 32
    ny: int = 32
    dx: float = 30.48
    dy: float = 30.48
    thickness: float = 15.24
    facies_perm: Mapping[int, float] = field(default_factory=lambda: {0: 500.0, 1: 5000.0})
    wells: Sequence[Well] = ()
    viscosity: float = 1.0
    porosity: float = 0.2
    report_times: Sequence[float] = (100.0, 200.0, 300.0)
    cfl: float = 0.9
    cg_tol: float = 1e-10
    cg_maxiter: int = 10000

    def __post_init__(self):
        object.__setattr__(self, "wells", tuple(self.wells))
        object.__setattr__(self, "report_times", tuple(float(t) for t in self.report_times))
        object.__setattr__(self, "facies_perm", dict(self.facies_perm))
        kinds = [w.kind for w in self.wells]
        if "producer" not in kinds or "injector" not in kinds:
            raise ValueError("need at least one producer and one injector")
        cells = set()
        for w in self.wells:
            if not (0 <= w.i < self.nx and 0 <= w.j < self.ny):
                raise ValueError(f"well {w.name} at ({w.i}, {w.j}) lies outside the {self.nx}x{self.ny} grid")
            if (w.i, w.j) in cells:
                raise ValueError(f"two wells share cell ({w.i}, {w.j})")
            cells.add((w.i, w.j))
        if len({w.name for w in self.wells}) != len(self.wells):
            raise ValueError("well names must be unique")
        if any(k <= 0 for k in self.facies_perm.values()):
            raise ValueError("permeabilities must be > 0")
        if min(self.dx, self.dy, self.thickness, self.viscosity, self.porosity) <= 0:
            raise ValueError("geometry, viscosity and porosity must be > 0")
        t = np.asarray(self.report_times)
        if t.size == 0 or t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValueError("report times must be positive and strictly increasing")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must be in (0, 1]")

    @property
    def producers(self):
        return [w for w in self.wells if w.kind == "producer"]

    @property
    def injectors(self):
        return [w for w in self.wells if w.kind == "injector"]

    @property
    def pore_volume(self) -> float:
        """Pore volume of one cell (m^3)."""
        return self.dx * self.dy * self.thickness * self.porosity

    def well_index(self, perm: float) -> float:
        """Peaceman well index for an isotropic cell (m^3/day/bar)."""
        r_o = 0.14 * math.hypot(self.dx, self.dy)
        r_w = 0.1 * self.dx
        return DARCY * 2.0 * math.pi * perm * self.thickness / (self.viscosity * math.log(r_o / r_w))


def conjugate_gradient(A, b, x0=None, tol=1e-10, maxiter=None, precondition=True):
    """Jacobi-preconditioned conjugate gradients for SPD ``A``.

    Stops when ``||b - A x|| <= tol * ||b||``.  Returns ``(x, iterations)``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    inv_diag = 1.0 / A.diagonal() if precondition else np.ones(n)
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it - 1
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise ConvergenceError("matrix is not positive definite (no well or zero transmissibility?)")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * bnorm:
        return x, maxiter
    raise ConvergenceError(f"CG did not reach relative residual {tol:g} in {maxiter} iterations")


def permeability_from_facies(grid: FaciesGrid | np.ndarray, cfg: SimConfig) -> np.ndarray:
    codes = grid.codes if isinstance(grid, FaciesGrid) else np.asarray(grid)
    present = np.unique(codes)
    missing = [int(c) for c in present if int(c) not in cfg.facies_perm]
    if missing:
        raise KeyError(f"no permeability mapped for facies code(s) {missing}")
    lut = np.zeros(int(present.max()) + 1)
    for c in present:
        lut[int(c)] = cfg.facies_perm[int(c)]
    return lut[codes]


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


@dataclass
class PressureSolution:
    """Cell pressures, inter-cell fluxes and well rates of one solve.

    ``flux_x[j, i]`` is the rate from cell ``(i, j)`` to ``(i+1, j)`` and
    ``flux_y[j, i]`` from ``(i, j)`` to ``(i, j+1)``.  ``well_rates`` is
    signed: positive means fluid entering the reservoir.
    """

    pressure: np.ndarray
    flux_x: np.ndarray
    flux_y: np.ndarray
    well_rates: np.ndarray
    wells: tuple
    iterations: int

    @property
    def source(self) -> np.ndarray:
        """Signed well rate per cell, shape ``(ny, nx)``."""
        q = np.zeros(self.pressure.shape)
        for w, r in zip(self.wells, self.well_rates):
            q[w.j, w.i] += r
        return q


def solve_pressure(perm: np.ndarray, cfg: SimConfig) -> PressureSolution:
    perm = np.asarray(perm, dtype=np.float64)
    ny, nx = perm.shape
    if (nx, ny) != (cfg.nx, cfg.ny):
        raise ValueError(f"permeability grid {nx}x{ny} does not match config {cfg.nx}x{cfg.ny}")
    mob = DARCY * cfg.thickness / cfg.viscosity
    tx = mob * cfg.dy / cfg.dx * _harmonic(perm[:, :-1], perm[:, 1:])
    ty = mob * cfg.dx / cfg.dy * _harmonic(perm[:-1, :], perm[1:, :])
    idx = np.arange(nx * ny).reshape(ny, nx)
    diag = np.zeros((ny, nx))
    diag[:, :-1] += tx
    diag[:, 1:] += tx
    diag[:-1, :] += ty
    diag[1:, :] += ty
    rhs = np.zeros((ny, nx))
    wi = np.array([cfg.well_index(perm[w.j, w.i]) for w in cfg.wells])
    for w, c in zip(cfg.wells, wi):
        diag[w.j, w.i] += c
        rhs[w.j, w.i] += c * w.bhp
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:, 1:].ravel(),
                           idx[:-1, :].ravel(), idx[1:, :].ravel(), idx.ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[:, :-1].ravel(),
                           idx[1:, :].ravel(), idx[:-1, :].ravel(), idx.ravel()])
    vals = np.concatenate([-tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel(), diag.ravel()])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny))
    p, iters = conjugate_gradient(A, rhs.ravel(), tol=cfg.cg_tol, maxiter=cfg.cg_maxiter)
    p = p.reshape(ny, nx)
    rates = np.array([c * (w.bhp - p[w.j, w.i]) for w, c in zip(cfg.wells, wi)])
    return PressureSolution(
        pressure=p,
        flux_x=tx * (p[:, :-1] - p[:, 1:]),
        flux_y=ty * (p[:-1, :] - p[1:, :]),
        well_rates=rates,
        wells=cfg.wells,
        iterations=iters,
    )


class TracerTransport:
    """Explicit upwind operator for the water fraction on a fixed flux field.

    One step is ``S <- S + dt / PV * (M @ S + q_inj)`` where ``M`` collects
    upwinded face fluxes and producer withdrawals.
    """

    def __init__(self, solution: PressureSolution, pore_volume: float | np.ndarray, cfl: float = 0.9):
        ny, nx = solution.pressure.shape
        self.shape = (ny, nx)
        self.cfl = cfl
        idx = np.arange(nx * ny).reshape(ny, nx)
        rows, cols, vals = [], [], []
        outflow = np.zeros(nx * ny)
        for flux, a, b in ((solution.flux_x, idx[:, :-1], idx[:, 1:]),
                           (solution.flux_y, idx[:-1, :], idx[1:, :])):
            f, a, b = flux.ravel(), a.ravel(), b.ravel()
            up = np.where(f > 0, a, b)
            down = np.where(f > 0, b, a)
            mag = np.abs(f)
            rows += [down, up]
            cols += [up, up]
            vals += [mag, -mag]
            np.add.at(outflow, up, mag)
        src = solution.source.ravel()
        prod = np.minimum(src, 0.0)
        rows.append(idx.ravel())
        cols.append(idx.ravel())
        vals.append(prod)
        outflow -= prod
        self.matrix = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                    shape=(nx * ny, nx * ny))
        self.injection = np.maximum(src, 0.0)
        self.pore_volume = np.broadcast_to(np.asarray(pore_volume, dtype=np.float64), (nx * ny,)).copy()
        self.outflow = outflow
        rate = outflow / self.pore_volume
        self.max_dt = math.inf if rate.max() <= 0 else cfl / rate.max()

    def step(self, s: np.ndarray, dt: float) -> np.ndarray:
        if dt > self.max_dt * (1.0 + 1e-12):
            raise ValueError(f"dt={dt:g} violates the CFL bound {self.max_dt:g}")
        flat = np.asarray(s, dtype=np.float64).ravel()
        new = flat + dt / self.pore_volume * (self.matrix @ flat + self.injection)
        # roundoff guard; the scheme is monotone under the CFL bound
        return np.clip(new, 0.0, 1.0).reshape(self.shape)

    def advance(self, s: np.ndarray, duration: float) -> np.ndarray:
        if duration <= 0:
            return np.asarray(s, dtype=np.float64).copy()
        n = 1 if math.isinf(self.max_dt) else max(1, math.ceil(duration / self.max_dt))
        dt = duration / n
        for _ in range(n):
            s = self.step(s, dt)
        return s


def advance_tracer(solution: PressureSolution, saturation: np.ndarray, dt: float,
                   cfg: SimConfig) -> np.ndarray:
    """One explicit upwind step; ``dt`` must respect the CFL bound."""
    return TracerTransport(solution, cfg.pore_volume, cfg.cfl).step(saturation, dt)


@dataclass
class PredictedData:
    """Well data at each report time.

    ``rates`` holds produced rate for producers and injected rate for
    injectors (both >= 0); ``water_cut`` is the water fraction of the
    produced stream (1 for injectors).  The flattened vector is time-major,
    well-minor; producers contribute ``(rate, water_cut)``, injectors
    ``(rate,)``.
    """

    times: np.ndarray
    wells: tuple
    rates: np.ndarray
    water_cut: np.ndarray

    def labels(self) -> list[tuple[float, str, str]]:
        out = []
        for t in self.times:
            for w in self.wells:
                out.append((float(t), w.name, "rate"))
                if w.kind == "producer":
                    out.append((float(t), w.name, "water_cut"))
        return out

    def vector(self) -> np.ndarray:
        out = []
        for it in range(len(self.times)):
            for iw, w in enumerate(self.wells):
                out.append(self.rates[it, iw])
                if w.kind == "producer":
                    out.append(self.water_cut[it, iw])
        return np.asarray(out)


def simulate(grid: FaciesGrid | np.ndarray, cfg: SimConfig) -> PredictedData:
    perm = permeability_from_facies(grid, cfg)
    sol = solve_pressure(perm, cfg)
    transport = TracerTransport(sol, cfg.pore_volume, cfg.cfl)
    s = np.zeros(perm.shape)
    signs = np.array([1.0 if w.kind == "injector" else -1.0 for w in cfg.wells])
    rates = np.tile(signs * sol.well_rates, (len(cfg.report_times), 1))
    wcut = np.ones_like(rates)
    t_prev = 0.0
    for it, t in enumerate(cfg.report_times):
        s = transport.advance(s, t - t_prev)
        t_prev = t
        for iw, w in enumerate(cfg.wells):
            if w.kind == "producer":
                wcut[it, iw] = s[w.j, w.i]
    return PredictedData(np.asarray(cfg.report_times), cfg.wells, rates, wcut)


def write_predicted_csv(path, data: PredictedData) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "well", "quantity", "value"])
        for (t, name, q), v in zip(data.labels(), data.vector()):
            w.writerow([repr(t), name, q, repr(float(v))])
