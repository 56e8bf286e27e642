"""Estimation of the radiation coefficients (alpha, beta).

Two routes are provided: fine-tuning a trained field network with the
coefficients as extra trainable scalars, and a direct least-squares fit of
the radiation relation to boundary signals (from the network or from the
finite-difference solver).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import diffnet, fdm
from .diffnet import DTYPE, NetworkParams, loss_gradient
from .physics import AirProperties, TubeGeometry, loss_coefficients
from .training import (
    AdamState,
    LbfgsState,
    PinnProblem,
    LossWeights,
    adam_step,
    lbfgs_minimize,
    lr_decay,
    observation_times,
    total_loss,
    weighted_terms,
)

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = ((0.0, 5.0), (0.0, 5.0))
DIVERGENCE_LIMIT = 10.0


class DegenerateProblem(ValueError):
    """The pressure and its time derivative are (numerically) collinear."""


@dataclass
class EstimationResult:
    method: str
    alpha_hat: float
    beta_hat: float
    residual: float
    trace: Optional[list] = None
    gt: Optional[tuple] = None

    @property
    def rel_errors(self):
        if self.gt is None:
            return None
        a, b = self.gt
        return abs(self.alpha_hat - a) / abs(a), abs(self.beta_hat - b) / abs(b)

    def to_dict(self, trace_csv_path=None) -> dict:
        rel = self.rel_errors
        return {
            "method": self.method,
            "alpha_hat": self.alpha_hat,
            "beta_hat": self.beta_hat,
            "residual": self.residual,
            "trace_csv_path": None if trace_csv_path is None else str(trace_csv_path),
            "gt": None if self.gt is None else {"alpha": self.gt[0], "beta": self.gt[1]},
            "rel_errors": None if rel is None else {"alpha": rel[0], "beta": rel[1]},
        }

    def write(self, json_path, trace_csv_path=None):
        if self.trace is not None and trace_csv_path is not None:
            write_trace(self.trace, trace_csv_path)
        Path(json_path).write_text(json.dumps(self.to_dict(trace_csv_path), indent=2, sort_keys=True))


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "alpha", "beta", "total_loss"])
        for row in trace:
            w.writerow([row["epoch"], repr(row["alpha"]), repr(row["beta"]), repr(row["total_loss"])])


# ---------------------------------------------------------------- TOM


@dataclass
class TomProblem:
    times: np.ndarray
    p: np.ndarray
    p_t: np.ndarray
    u_t: np.ndarray
    scale: float
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        self.times, self.p, self.p_t, self.u_t = (
            np.asarray(a, dtype=float) for a in (self.times, self.p, self.p_t, self.u_t)
        )
        n = self.times.shape
        if not (self.p.shape == self.p_t.shape == self.u_t.shape == n):
            raise ValueError("signals must share the time base")
        for lo, hi in self.bounds:
            if lo > hi:
                raise ValueError("lower bound exceeds upper bound")


def _objective(D, y, ab):
    r = y - D @ ab
    return float(r @ r)


def tom_fit(problem: TomProblem, method: str = "TOM", gt=None) -> EstimationResult:
    """Box-constrained least squares for (rho c / A) u_t = alpha p + beta p_t.

    The objective is a convex quadratic in two variables, so its minimizer
    over the box is either the unconstrained solution or lies on an edge;
    all candidates are enumerated and the best feasible one is returned.
    """
    D = np.column_stack([problem.p, problem.p_t])
    y = problem.scale * problem.u_t
    norms = np.linalg.norm(D, axis=0)
    if np.any(norms == 0):
        raise DegenerateProblem("a design column is identically zero")
    Dn = D / norms
    G = Dn.T @ Dn
    if np.linalg.det(G) < 1e-12:
        raise DegenerateProblem("p and p_t are linearly dependent")
    (a_lo, a_hi), (b_lo, b_hi) = problem.bounds
    candidates = [np.linalg.solve(G, Dn.T @ y) / norms]
    # one coefficient on a bound, the other optimal and clipped
    for a in (a_lo, a_hi):
        b = float(D[:, 1] @ (y - a * D[:, 0])) / norms[1] ** 2
        candidates.append(np.array([a, min(max(b, b_lo), b_hi)]))
    for b in (b_lo, b_hi):
        a = float(D[:, 0] @ (y - b * D[:, 1])) / norms[0] ** 2
        candidates.append(np.array([min(max(a, a_lo), a_hi), b]))
    feasible = [
        c for c in candidates if a_lo <= c[0] <= a_hi and b_lo <= c[1] <= b_hi
    ]
    best = min(feasible, key=lambda c: _objective(D, y, c))
    residual = math.sqrt(_objective(D, y, best))
    return EstimationResult(method, float(best[0]), float(best[1]), residual, gt=gt)


def tom_collect_signals(
    params: NetworkParams,
    geom: TubeGeometry,
    air: AirProperties,
    n_times: int = 1000,
    period: float | None = None,
) -> TomProblem:
    """Boundary signals at x = L from exact mixed-derivative jets of the network."""
    period = params.config.period if period is None else period
    L = geom.length
    times = observation_times(n_times, period)
    with torch.no_grad():
        ev = diffnet.evaluate_mixed(params, np.full(n_times, L), times)
    R, _ = loss_coefficients(air, geom, L)
    A = float(geom.area(L))
    R = float(R)
    p = ev.pressure(R, A, air.rho).numpy()
    p_t = ev.pressure_t(R, A, air.rho).numpy()
    u_t = ev.volume_velocity_t(A).numpy()
    return TomProblem(times, p, p_t, u_t, air.rho * air.c / A)


def fdm_tom_problem(sol: fdm.FdmSolution, geom: TubeGeometry, n_times: int = 1000) -> TomProblem:
    times = observation_times(n_times, sol.period)
    p, p_t, u_t = fdm.boundary_signals(sol, times)
    A = float(geom.area(geom.length))
    return TomProblem(times, p, p_t, u_t, sol.air.rho * sol.air.c / A)


def tomb_fit(sol: fdm.FdmSolution, geom: TubeGeometry, n_times: int = 1000, gt=None) -> EstimationResult:
    """Least-squares fit on noise-free finite-difference boundary signals."""
    return tom_fit(fdm_tom_problem(sol, geom, n_times), method="TOMB", gt=gt)


# ---------------------------------------------------------------- FTM


@dataclass
class FtmConfig:
    adam_epochs: int = 20000
    net_lr: float = 1e-4
    rad_lr: float = 1e-2
    lbfgs_epochs: int = 1500
    lbfgs_max_iter: int = 20
    lbfgs_history: int = 10
    lambda_rad: float = 1.0
    alpha_init: float = 1.0
    beta_init: float = 1.0
    update_net: bool = True
    update_rad: bool = True


@dataclass
class FtmState:
    params: NetworkParams
    alpha: float
    beta: float
    adam_net: AdamState
    adam_rad: AdamState
    epoch: int = 0
    lbfgs_epoch: int = 0
    trace: list = field(default_factory=list)


class FtmObjective:
    """Training loss plus the weighted radiation residual at the observation times."""

    def __init__(self, problem: PinnProblem, template: NetworkParams, weights: LossWeights,
                 lambda_rad: float):
        self.problem, self.template, self.weights = problem, template, weights
        self.lambda_rad = lambda_rad
        self.n_net = template.flat().numel()
        geom, air = problem.geom, problem.air
        L = geom.length
        R, _ = loss_coefficients(air, geom, L)
        self.R_L, self.A_L = float(R), float(geom.area(L))
        self.scale = air.rho * air.c / self.A_L
        self.obs_x = np.full(problem.obs.times.size, L)

    def radiation_residual(self, params, alpha, beta):
        ev = diffnet.evaluate_mixed(params, self.obs_x, self.problem.obs.times)
        rho = self.problem.air.rho
        return (
            self.scale * ev.volume_velocity_t(self.A_L)
            - alpha * ev.pressure(self.R_L, self.A_L, rho)
            - beta * ev.pressure_t(self.R_L, self.A_L, rho)
        )

    def __call__(self, vec: torch.Tensor):
        """Loss and gradient at ``vec = [network params, alpha, beta]``."""
        params = self.template.with_flat(vec[: self.n_net]).requires_grad_()
        ab = vec[self.n_net:].clone().requires_grad_(True)
        partials = self.problem.partial_losses(params)
        rad = self.radiation_residual(params, ab[0], ab[1])
        rad_loss = (rad * rad).mean()
        total = total_loss(partials, self.weights) + self.lambda_rad * rad_loss
        terms = weighted_terms(partials, self.weights)
        terms["rad"] = self.lambda_rad * rad_loss
        grads = loss_gradient(params.tensors() + [ab], total, terms)
        g = torch.cat([t.reshape(-1) for t in grads])
        return float(total.detach()), g


def _check_divergence(alpha, beta, warned):
    if not warned and (abs(alpha) > DIVERGENCE_LIMIT or abs(beta) > DIVERGENCE_LIMIT):
        warnings.warn(
            f"radiation coefficients left [-{DIVERGENCE_LIMIT}, {DIVERGENCE_LIMIT}]: "
            f"alpha={alpha:.4g}, beta={beta:.4g}",
            RuntimeWarning,
            stacklevel=3,
        )
        return True
    return warned


def ftm_train(
    gamma_params: NetworkParams,
    problem: PinnProblem,
    weights: LossWeights,
    cfg: FtmConfig,
    gt=None,
) -> tuple[EstimationResult, FtmState]:
    """Fine-tune the network jointly with (alpha, beta).

    Adam phase: the network follows its own Adam (decayed from ``net_lr``)
    and the coefficients a separate one (decayed from ``rad_lr``).  Then
    L-BFGS refines everything jointly.
    """
    obj = FtmObjective(problem, gamma_params, weights, cfg.lambda_rad)
    n = obj.n_net
    vec = torch.cat([gamma_params.flat(), torch.tensor([cfg.alpha_init, cfg.beta_init], dtype=DTYPE)])
    state = FtmState(gamma_params, cfg.alpha_init, cfg.beta_init,
                     AdamState.zeros(n), AdamState.zeros(2))
    warned = False
    t0 = time.perf_counter()
    for epoch in range(cfg.adam_epochs):
        f, g = obj(vec)
        if not math.isfinite(f):
            raise diffnet.NumericError(f"non-finite FTM loss at epoch {epoch}")
        state.trace.append({"epoch": epoch, "alpha": float(vec[n]), "beta": float(vec[n + 1]),
                            "total_loss": f})
        net, rad = vec[:n], vec[n:]
        if cfg.update_net:
            net = adam_step(state.adam_net, net, g[:n], lr_decay(epoch, cfg.net_lr))
        if cfg.update_rad:
            rad = adam_step(state.adam_rad, rad, g[n:], lr_decay(epoch, cfg.rad_lr))
        vec = torch.cat([net, rad])
        state.epoch = epoch + 1
        warned = _check_divergence(float(vec[n]), float(vec[n + 1]), warned)
        if epoch % 500 == 0:
            log.info("ftm %6d  loss %.6e  alpha %.5f  beta %.5f", epoch, f, vec[n], vec[n + 1])

    if cfg.lbfgs_epochs > 0:
        base = cfg.adam_epochs

        def on_epoch(i, x, f):
            nonlocal warned
            state.trace.append({"epoch": base + i, "alpha": float(x[n]), "beta": float(x[n + 1]),
                                "total_loss": f})
            state.lbfgs_epoch = i + 1
            warned = _check_divergence(float(x[n]), float(x[n + 1]), warned)

        vec, _, _ = lbfgs_minimize(vec, obj, cfg.lbfgs_epochs,
                                   state=LbfgsState(history=cfg.lbfgs_history),
                                   max_iter=cfg.lbfgs_max_iter, on_epoch=on_epoch)

    state.params = gamma_params.with_flat(vec[:n])
    state.alpha, state.beta = float(vec[n]), float(vec[n + 1])
    with torch.no_grad():
        rad = obj.radiation_residual(state.params, state.alpha, state.beta)
    log.info("ftm finished in %.1f s", time.perf_counter() - t0)
    result = EstimationResult("FTM", state.alpha, state.beta, float(torch.linalg.vector_norm(rad)),
                              trace=state.trace, gt=gt)
    return result, state
