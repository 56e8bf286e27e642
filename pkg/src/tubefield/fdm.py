"""Reference finite-difference solver for the lossy horn equation.

Centered-time centered-space discretization of

    phi_xx + (A_x / A) phi_x = G R phi + (G rho / A + R A / K) phi_t + (rho / K) phi_tt

with a volume-velocity source at x = 0 and the time-domain radiation
condition (rho c / A) u_t = alpha p + beta p_t at x = L.  The scheme is
marched from rest until the field repeats from one period to the next.

Storage convention: a period buffer holds rows ``phi[j] = phi(t0 + j dt)``
for ``j = 0 .. S-1``; the rows just before and just after the period are kept
as halos so that centered time differences are available on every row.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline

from .physics import (
    AirProperties,
    SourceWaveform,
    TubeGeometry,
    loss_coefficients,
    rosenberg_flow,
)

log = logging.getLogger(__name__)

CORRECTOR_TOL = 1e-10
CORRECTOR_MAX_ITER = 50


class FdmError(RuntimeError):
    """Instability, corrector failure or missing steady state."""


@dataclass(frozen=True)
class FdmGrid:
    nx: int
    dt: float
    dx: float
    steps_per_period: int
    courant: float

    @classmethod
    def build(cls, length: float, period: float, c: float, nx: int, courant_target: float = 0.9):
        if nx < 4:
            raise ValueError("need at least 4 spatial points")
        if not 0 < courant_target <= 1:
            raise ValueError("courant_target must lie in (0, 1]")
        dx = length / (nx - 1)
        steps = int(math.ceil(period * c / (courant_target * dx) - 1e-9))
        dt = period / steps
        return cls(nx=nx, dt=dt, dx=dx, steps_per_period=steps, courant=c * dt / dx)


@dataclass
class FdmConfig:
    nx: int = 501
    courant: float = 0.9
    max_periods: int = 4000
    steady_tol: float = 1e-8


@dataclass
class Coefficients:
    """Per-node coefficients of the discretized equation."""

    A: np.ndarray
    Ax_over_A: np.ndarray
    R: np.ndarray
    G: np.ndarray
    B: np.ndarray  # coefficient of phi_t
    E: np.ndarray  # coefficient of phi (G R)
    C: float  # coefficient of phi_tt (rho / K)

    @classmethod
    def build(cls, geom: TubeGeometry, air: AirProperties, x: np.ndarray, lossless: bool = False):
        A = geom.area(x)
        Ax = geom.area_slope(x)
        if lossless:
            R = np.zeros_like(x)
            G = np.zeros_like(x)
        else:
            R, G = loss_coefficients(air, geom, x)
        B = G * air.rho / A + R * A / air.K
        return cls(A=A, Ax_over_A=Ax / A, R=R, G=G, B=B, E=G * R, C=air.rho / air.K)


@dataclass
class FdmSolution:
    x: np.ndarray
    t: np.ndarray
    phi: np.ndarray
    phi_before: np.ndarray
    phi_after: np.ndarray
    grid: FdmGrid
    coeffs: Coefficients
    air: AirProperties
    alpha: float
    beta: float
    period: float
    periods_run: int
    steady_residual: float
    max_corrector_iterations: int
    boundary_p_norms: np.ndarray = field(repr=False)
    first_period_max: float = 0.0
    run_max: float = 0.0

    @property
    def relative_steady_residual(self) -> float:
        scale = np.abs(self.phi).max()
        return self.steady_residual / scale if scale > 0 else self.steady_residual

    def _padded(self):
        return np.concatenate([self.phi_before[None], self.phi, self.phi_after[None]])

    def phi_t(self) -> np.ndarray:
        full = self._padded()
        return (full[2:] - full[:-2]) / (2 * self.grid.dt)

    def pressure(self) -> np.ndarray:
        c = self.coeffs
        return c.R * c.A * self.phi + self.air.rho * self.phi_t()

    def volume_velocity(self) -> np.ndarray:
        grad = np.gradient(self.phi, self.grid.dx, axis=1, edge_order=2)
        return -self.coeffs.A * grad


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def fdm_interior_step(phi_prev, phi_curr, phi_next, dx, dt, ax_over_a, E, B, C, forcing):
    """Fill ``phi_next[1:-1]``; boundary entries are left untouched."""
    n = phi_curr.size
    inv_dx2 = 1.0 / (dx * dx)
    inv_2dx = 0.5 / dx
    inv_dt2 = 1.0 / (dt * dt)
    inv_2dt = 0.5 / dt
    for i in range(1, n - 1):
        lap = (phi_curr[i + 1] - 2.0 * phi_curr[i] + phi_curr[i - 1]) * inv_dx2
        adv = ax_over_a[i] * (phi_curr[i + 1] - phi_curr[i - 1]) * inv_2dx
        rhs = (
            lap
            + adv
            - E[i] * phi_curr[i]
            + C * (2.0 * phi_curr[i] - phi_prev[i]) * inv_dt2
            + B[i] * phi_prev[i] * inv_2dt
            - forcing[i]
        )
        phi_next[i] = rhs / (C * inv_dt2 + B[i] * inv_2dt)


@njit(cache=True)
def apply_source_bc(phi_next, u_source, A0, dx):
    """Boundary node from -A(0) phi_x(0) = u with the one-sided 3-point stencil."""
    return (4.0 * phi_next[1] - phi_next[2] + 2.0 * dx * u_source / A0) / 3.0


@njit(cache=True)
def radiation_residual(y, phi_next, phi_curr, phi_prev, AN, RN, rho, c, alpha, beta, dx, dt, g):
    """Discrete (rho c / A) u_t - alpha p - beta p_t at time level n, y = phi_N^{n+1}."""
    N = phi_curr.size - 1
    u_next = -AN * (3.0 * y - 4.0 * phi_next[N - 1] + phi_next[N - 2]) / (2.0 * dx)
    u_prev = -AN * (3.0 * phi_prev[N] - 4.0 * phi_prev[N - 1] + phi_prev[N - 2]) / (2.0 * dx)
    phi_t = (y - phi_prev[N]) / (2.0 * dt)
    phi_tt = (y - 2.0 * phi_curr[N] + phi_prev[N]) / (dt * dt)
    p = RN * AN * phi_curr[N] + rho * phi_t
    p_t = RN * AN * phi_t + rho * phi_tt
    return rho * c / AN * (u_next - u_prev) / (2.0 * dt) - alpha * p - beta * p_t - g


@njit(cache=True)
def apply_radiation_bc(phi_next, phi_curr, phi_prev, phiN_prev2, AN, RN, rho, c, alpha, beta, dx, dt, g):
    """Predictor-corrector solve for the radiation-end node.

    Predictor: quadratic extrapolation from the three previous boundary
    values.  Corrector: re-solve the discretized radiation condition about
    the current iterate until successive iterates agree to CORRECTOR_TOL.
    Returns (value, iterations); iterations < 0 signals non-convergence.
    """
    N = phi_curr.size - 1
    y = 3.0 * phi_curr[N] - 3.0 * phi_prev[N] + phiN_prev2
    slope = (
        -3.0 * rho * c / (4.0 * dx * dt)
        - alpha * rho / (2.0 * dt)
        - beta * (RN * AN / (2.0 * dt) + rho / (dt * dt))
    )
    scale = abs(phi_curr[N]) + abs(phi_prev[N])
    for it in range(1, CORRECTOR_MAX_ITER + 1):
        r = radiation_residual(y, phi_next, phi_curr, phi_prev, AN, RN, rho, c, alpha, beta, dx, dt, g)
        y_new = y - r / slope
        done = abs(y_new - y) <= CORRECTOR_TOL * max(abs(y_new), scale)
        y = y_new
        if done:
            return y, it
    return y, -CORRECTOR_MAX_ITER


@njit(cache=True)
def _march_period(phi_prev, phi_curr, phiN_prev2, buf, u_src, A, ax_over_a, E, B, C, RN,
                  rho, c, alpha, beta, dx, dt):
    """Advance one period in place; returns (phiN_prev2, max_iter, bad_step, p_sq_sum, max_abs)."""
    S = buf.shape[0]
    n = phi_curr.size
    N = n - 1
    zeros = np.zeros(n)
    phi_next = np.empty(n)
    max_it = 0
    p_sq = 0.0
    max_abs = 0.0
    for j in range(S):
        buf[j, :] = phi_curr
        fdm_interior_step(phi_prev, phi_curr, phi_next, dx, dt, ax_over_a, E, B, C, zeros)
        phi_next[0] = apply_source_bc(phi_next, u_src[(j + 1) % S], A[0], dx)
        yN, it = apply_radiation_bc(phi_next, phi_curr, phi_prev, phiN_prev2, A[N], RN, rho, c,
                                    alpha, beta, dx, dt, 0.0)
        if it < 0:
            return phiN_prev2, it, j, p_sq, max_abs
        phi_next[N] = yN
        if it > max_it:
            max_it = it
        pN = RN * A[N] * phi_curr[N] + rho * (phi_next[N] - phi_prev[N]) / (2.0 * dt)
        p_sq += pN * pN
        for i in range(n):
            v = phi_next[i]
            if not np.isfinite(v):
                return phiN_prev2, max_it, j, p_sq, max_abs
            if abs(v) > max_abs:
                max_abs = abs(v)
        phiN_prev2 = phi_prev[N]
        phi_prev[:] = phi_curr
        phi_curr[:] = phi_next
    return phiN_prev2, max_it, -1, p_sq, max_abs


# ---------------------------------------------------------------- driver


def run_to_steady_state(
    geom: TubeGeometry,
    air: AirProperties,
    source: SourceWaveform,
    alpha: float,
    beta: float,
    config: FdmConfig | None = None,
    lossless: bool = False,
) -> FdmSolution:
    """March from rest until consecutive periods agree to ``steady_tol``."""
    cfg = config or FdmConfig()
    grid = FdmGrid.build(geom.length, source.T, air.c, cfg.nx, cfg.courant)
    if grid.courant > 1.0:
        raise FdmError(f"courant number {grid.courant:.3f} exceeds 1")
    x = np.linspace(0.0, geom.length, grid.nx)
    co = Coefficients.build(geom, air, x, lossless=lossless)
    S = grid.steps_per_period
    u_src = rosenberg_flow(np.arange(S) * grid.dt, source)

    phi_prev = np.zeros(grid.nx)
    phi_curr = np.zeros(grid.nx)
    phiN_prev2 = 0.0
    bufs = [np.empty((S, grid.nx)), np.empty((S, grid.nx))]
    norms = []
    first_max = run_max = 0.0
    residual = math.inf
    max_iter = 0
    for k in range(cfg.max_periods):
        buf = bufs[k % 2]
        before = phi_prev.copy()
        phiN_prev2, it, bad, p_sq, mx = _march_period(
            phi_prev, phi_curr, phiN_prev2, buf, u_src, co.A, co.Ax_over_A, co.E, co.B, co.C,
            co.R[-1], air.rho, air.c, alpha, beta, grid.dx, grid.dt,
        )
        if it < 0:
            raise FdmError(f"radiation corrector did not converge at step {k * S + bad}")
        if bad >= 0:
            raise FdmError(f"non-finite field at step {k * S + bad + 1} (period {k})")
        max_iter = max(max_iter, it)
        norms.append(math.sqrt(p_sq * grid.dt))
        run_max = max(run_max, mx)
        if k == 0:
            first_max = mx
        if k > 0:
            residual = float(np.abs(buf - bufs[(k - 1) % 2]).max())
            scale = float(np.abs(buf).max())
            if residual <= cfg.steady_tol * scale:
                break
        elif first_max == 0.0:
            # Nothing drives the tube; rest is the periodic state.
            residual = 0.0
            break
    else:
        raise FdmError(
            f"no periodic steady state after {cfg.max_periods} periods "
            f"(last residual {residual:.3e})"
        )
    log.info("fdm: %d periods, residual %.3e, corrector <= %d iterations", k + 1, residual, max_iter)
    return FdmSolution(
        x=x,
        t=np.arange(S) * grid.dt,
        phi=buf,
        phi_before=before,
        phi_after=phi_curr.copy(),
        grid=grid,
        coeffs=co,
        air=air,
        alpha=alpha,
        beta=beta,
        period=source.T,
        periods_run=k + 1,
        steady_residual=residual,
        max_corrector_iterations=max_iter,
        boundary_p_norms=np.array(norms),
        first_period_max=first_max,
        run_max=run_max,
    )


def march_forced(geom, air, alpha, beta, nx, t_end, phi_exact, forcing, radiation_forcing,
                 source_flow, courant=0.9, lossless=False):
    """March from exact data at t = 0, dt with manufactured source terms.

    ``forcing(x, t)`` is added to the interior equation as
    ``phi_xx + (A_x/A) phi_x - G R phi - B phi_t - C phi_tt = forcing``,
    ``radiation_forcing(t)`` to the radiation condition and
    ``source_flow(t)`` drives x = 0.  Returns ``(x, phi(t_end), dt)``.
    """
    dx = geom.length / (nx - 1)
    steps = int(math.ceil(t_end * air.c / (courant * dx) - 1e-9))
    dt = t_end / steps
    x = np.linspace(0.0, geom.length, nx)
    co = Coefficients.build(geom, air, x, lossless=lossless)
    N = nx - 1
    phi_prev = phi_exact(x, 0.0)
    phi_curr = phi_exact(x, dt)
    phiN_prev2 = float(phi_exact(x[-1:], -dt)[0])
    phi_next = np.empty(nx)
    for n in range(1, steps):
        t = n * dt
        fill = np.asarray(forcing(x, t), dtype=float)
        fdm_interior_step(phi_prev, phi_curr, phi_next, dx, dt, co.Ax_over_A, co.E, co.B, co.C, fill)
        phi_next[0] = apply_source_bc(phi_next, float(source_flow(t + dt)), co.A[0], dx)
        yN, it = apply_radiation_bc(phi_next, phi_curr, phi_prev, phiN_prev2, co.A[N], co.R[N],
                                    air.rho, air.c, alpha, beta, dx, dt, float(radiation_forcing(t)))
        if it < 0:
            raise FdmError(f"radiation corrector did not converge at step {n}")
        phi_next[N] = yN
        phiN_prev2 = phi_prev[N]
        phi_prev, phi_curr, phi_next = phi_curr, phi_next, phi_prev
    return x, phi_curr.copy(), dt


def boundary_signals_on_grid(sol: FdmSolution):
    """p, p_t, u_t at x = L on the FDM time grid, using the boundary stencils."""
    full = sol._padded()
    dt, dx = sol.grid.dt, sol.grid.dx
    co = sol.coeffs
    AN, RN, rho = co.A[-1], co.R[-1], sol.air.rho
    phiN = full[:, -1]
    u = -AN * (3.0 * full[:, -1] - 4.0 * full[:, -2] + full[:, -3]) / (2.0 * dx)
    phi_t = (phiN[2:] - phiN[:-2]) / (2 * dt)
    phi_tt = (phiN[2:] - 2 * phiN[1:-1] + phiN[:-2]) / dt**2
    p = RN * AN * phiN[1:-1] + rho * phi_t
    p_t = RN * AN * phi_t + rho * phi_tt
    u_t = (u[2:] - u[:-2]) / (2 * dt)
    return p, p_t, u_t


def _periodic_spline(t, values, period):
    """Cubic spline through a period of samples plus the wrap sample at T."""
    return CubicSpline(np.append(t, period), values, axis=0)


def boundary_signals(sol: FdmSolution, times=None):
    """(p, p_t, u_t) at x = L, resampled to ``times`` (default: the FDM grid)."""
    p, p_t, u_t = boundary_signals_on_grid(sol)
    if times is None:
        return p, p_t, u_t
    # Halo samples give the values at t = T without assuming exact periodicity.
    after = _after_signals(sol)
    out = []
    for series, last in zip((p, p_t, u_t), after):
        spl = _periodic_spline(sol.t, np.append(series, last), sol.period)
        out.append(spl(np.asarray(times, dtype=float)))
    return tuple(out)


def _after_signals(sol: FdmSolution):
    # The row after the period is the first row of the next one; periodicity
    # holds to the steady tolerance, so the first samples stand in for it.
    p, p_t, u_t = boundary_signals_on_grid(sol)
    return p[0], p_t[0], u_t[0]


def radiation_residual_norm(sol: FdmSolution) -> float:
    """Relative L2 residual of the radiation condition on the converged signals."""
    p, p_t, u_t = boundary_signals_on_grid(sol)
    lhs = sol.air.rho * sol.air.c / sol.coeffs.A[-1] * u_t
    res = lhs - sol.alpha * p - sol.beta * p_t
    return float(np.linalg.norm(res) / np.linalg.norm(lhs))


def resample_to_grid(sol: FdmSolution, nx_out: int = 5001, nt_out: int = 1001) -> dict:
    """Interpolate phi, p and u onto a uniform ``nx_out`` x ``nt_out`` grid.

    Time is resampled with a cubic spline over [0, T] (the halo row supplies
    t = T), space with linear interpolation.  Output arrays are indexed
    ``[time, space]``.  Requesting the computational grid itself returns
    copies of the stored arrays.
    """
    if nx_out < 2 or nt_out < 2:
        raise ValueError("evaluation grid needs at least 2 points per axis")
    S = sol.grid.steps_per_period
    x_out = np.linspace(0.0, sol.x[-1], nx_out)
    t_out = np.linspace(0.0, sol.period, nt_out)
    fields = {"phi": sol.phi, "p": sol.pressure(), "u": sol.volume_velocity()}
    if nx_out == sol.grid.nx and nt_out == S:
        return {"x": sol.x.copy(), "t": sol.t.copy(), **{k: v.copy() for k, v in fields.items()}}
    p_after = _row_after(sol)
    out = {"x": x_out, "t": t_out}
    for name, arr in fields.items():
        ext = np.concatenate([arr, p_after[name][None]])
        in_time = CubicSpline(np.append(sol.t, sol.period), ext, axis=0)(t_out)
        if nx_out == sol.grid.nx:
            out[name] = in_time
        else:
            out[name] = _interp_space(sol.x, in_time, x_out)
    return out


def _row_after(sol: FdmSolution) -> dict:
    """Fields at t = T, taken from the first row of the (periodic) state."""
    return {
        "phi": sol.phi_after,
        "p": sol.pressure()[0],
        "u": sol.volume_velocity()[0],
    }


def _interp_space(x, values, x_out):
    idx = np.clip(np.searchsorted(x, x_out, side="right") - 1, 0, x.size - 2)
    w = (x_out - x[idx]) / (x[idx + 1] - x[idx])
    return values[:, idx] * (1.0 - w) + values[:, idx + 1] * w


def solution_manifest(sol: FdmSolution, config_blob: dict | None = None) -> dict:
    blob = json.dumps(config_blob or {}, sort_keys=True).encode()
    return {
        "grid": {
            "nx": sol.grid.nx,
            "dx": sol.grid.dx,
            "dt": sol.grid.dt,
            "steps_per_period": sol.grid.steps_per_period,
            "courant": sol.grid.courant,
        },
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "steady_residual": sol.steady_residual,
        "relative_steady_residual": sol.relative_steady_residual,
        "periods_run": sol.periods_run,
        "max_corrector_iterations": sol.max_corrector_iterations,
    }


def save_solution(sol: FdmSolution, path, lossless: bool = False) -> None:
    """Store a converged solution (rebuilt later against the same geometry)."""
    g = sol.grid
    np.savez(
        path,
        x=sol.x, t=sol.t, phi=sol.phi, phi_before=sol.phi_before, phi_after=sol.phi_after,
        boundary_p_norms=sol.boundary_p_norms,
        grid=np.array([g.nx, g.dt, g.dx, g.steps_per_period, g.courant]),
        scalars=np.array([sol.alpha, sol.beta, sol.period, sol.periods_run, sol.steady_residual,
                          sol.max_corrector_iterations, sol.first_period_max, sol.run_max,
                          float(lossless)]),
    )


def load_solution(path, geom: TubeGeometry, air: AirProperties) -> FdmSolution:
    with np.load(path) as z:
        nx, dt, dx, steps, courant = z["grid"]
        (alpha, beta, period, periods_run, residual, max_it, first_max, run_max,
         lossless) = z["scalars"]
        grid = FdmGrid(int(nx), float(dt), float(dx), int(steps), float(courant))
        return FdmSolution(
            x=z["x"], t=z["t"], phi=z["phi"], phi_before=z["phi_before"],
            phi_after=z["phi_after"], grid=grid,
            coeffs=Coefficients.build(geom, air, z["x"], lossless=bool(lossless)),
            air=air, alpha=float(alpha), beta=float(beta), period=float(period),
            periods_run=int(periods_run), steady_residual=float(residual),
            max_corrector_iterations=int(max_it), boundary_p_norms=z["boundary_p_norms"],
            first_period_max=float(first_max), run_max=float(run_max),
        )
