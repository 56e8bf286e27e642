"""Collocation, loss terms and optimizers for fitting the field network."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import diffnet
from .diffnet import DTYPE, FieldEval, NetworkParams, loss_gradient
from .physics import AirProperties, SourceWaveform, TubeGeometry, loss_coefficients, rosenberg_flow

log = logging.getLogger(__name__)

ADAM_DECAY = 0.007


# ---------------------------------------------------------------- sampling

_SOBOL_BITS = 52


def _sobol_directions():
    """Direction integers (scaled to 2**52) for the first two Sobol dimensions."""
    v1 = [1 << (_SOBOL_BITS - k) for k in range(1, _SOBOL_BITS + 1)]
    # Second dimension: primitive polynomial x + 1, m_1 = 1, m_k = 2 m_{k-1} xor m_{k-1}.
    m = [1]
    for _ in range(1, _SOBOL_BITS):
        m.append((m[-1] << 1) ^ m[-1])
    v2 = [mk << (_SOBOL_BITS - k) for k, mk in enumerate(m, start=1)]
    return v1, v2


def sobol2d(n: int, skip: int = 1) -> np.ndarray:
    """Points ``skip .. skip+n-1`` of the unscrambled 2D Sobol sequence (Gray-code order)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if skip < 0:
        raise ValueError("skip must be >= 0")
    v1, v2 = _sobol_directions()
    x1 = x2 = 0
    out = np.empty((n, 2))
    scale = 1.0 / (1 << _SOBOL_BITS)
    for i in range(skip + n):
        if i >= skip:
            out[i - skip] = (x1 * scale, x2 * scale)
        # lowest zero bit of i selects the direction number
        c = (~i & (i + 1)).bit_length() - 1
        x1 ^= v1[c]
        x2 ^= v2[c]
    return out


@dataclass
class CollocationConfig:
    n_pde: int = 5000
    n_bc: int = 1000
    n_pc: int = 1000
    n_obs: int = 1000
    sobol_skip: int = 1


@dataclass
class CollocationSets:
    pde_x: np.ndarray
    pde_t: np.ndarray
    bc_t: np.ndarray
    pc_x: np.ndarray
    obs_t: np.ndarray
    length: float
    period: float

    @classmethod
    def build(cls, cfg: CollocationConfig, length: float, period: float) -> "CollocationSets":
        pts = sobol2d(cfg.n_pde, cfg.sobol_skip)
        return cls(
            pde_x=pts[:, 0] * length,
            pde_t=pts[:, 1] * period,
            bc_t=np.linspace(0.0, period, cfg.n_bc, endpoint=False),
            pc_x=np.linspace(0.0, length, cfg.n_pc),
            obs_t=observation_times(cfg.n_obs, period),
            length=length,
            period=period,
        )


def observation_times(n: int, period: float) -> np.ndarray:
    """Uniform on [0, T), the wrap-around sample T being the same as 0."""
    return np.linspace(0.0, period, n, endpoint=False)


@dataclass
class ObservationData:
    times: np.ndarray
    pressures: np.ndarray
    snr_db: float = math.inf
    noise_seed: Optional[int] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.pressures = np.asarray(self.pressures, dtype=float)
        if self.times.shape != self.pressures.shape:
            raise ValueError("times and pressures must have the same shape")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")


# ---------------------------------------------------------------- losses


@dataclass
class LossWeights:
    pde: float = 5e-6
    bc: float = 3.4e5
    obs: float = 1.0
    pc: float = 1.0
    pc_u: float = 5e4
    pc_p: float = 1.0
    pc_phitt: float = 1e-8

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, float) and v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def pde_residual(ev: FieldEval, A, Ax, R, G, rho, K, literal_sign: bool = False):
    """phi_xx + (A_x/A) phi_x - G R phi - (G rho/A + R A/K) phi_t - (rho/K) phi_tt.

    ``literal_sign`` flips the R A / K term inside the phi_t coefficient.
    """
    damping = G * rho / A + (-1.0 if literal_sign else 1.0) * R * A / K
    return (
        ev.phi_xx + Ax / A * ev.phi_x - G * R * ev.phi - damping * ev.phi_t - rho / K * ev.phi_tt
    )


def _mse(r):
    return (r * r).mean()


def loss_bc(u_hat, u_source):
    return _mse(u_hat - u_source)


def loss_pc(u0, uT, p0, pT, tt0, ttT):
    return _mse(u0 - uT), _mse(p0 - pT), _mse(tt0 - ttT)


def loss_obs(p_hat, p_obs):
    return _mse(p_hat - p_obs)


def total_loss(partials: dict, w: LossWeights):
    total = (
        w.pde * partials["pde"]
        + w.bc * partials["bc"]
        + w.obs * partials["obs"]
        + w.pc * (w.pc_u * partials["pc_u"] + w.pc_p * partials["pc_p"] + w.pc_phitt * partials["pc_phitt"])
    )
    return total


def weighted_terms(partials: dict, w: LossWeights) -> dict:
    return {
        "pde": w.pde * partials["pde"],
        "bc": w.bc * partials["bc"],
        "obs": w.obs * partials["obs"],
        "pc_u": w.pc * w.pc_u * partials["pc_u"],
        "pc_p": w.pc * w.pc_p * partials["pc_p"],
        "pc_phitt": w.pc * w.pc_phitt * partials["pc_phitt"],
    }


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


class PinnProblem:
    """Everything needed to evaluate the losses for a given network.

    Feature jets of all collocation sets are computed once; a loss
    evaluation then runs one x-directed and one t-directed pass through the
    trunk over the concatenated points.
    """

    def __init__(
        self,
        sets: CollocationSets,
        obs: ObservationData,
        geom: TubeGeometry,
        air: AirProperties,
        source: SourceWaveform,
        template: NetworkParams,
        literal_sign: bool = False,
    ):
        self.sets, self.obs, self.geom, self.air, self.source = sets, obs, geom, air, source
        self.literal_sign = literal_sign
        L, T = sets.length, sets.period
        npde, nbc, npc, nobs = sets.pde_x.size, sets.bc_t.size, sets.pc_x.size, obs.times.size
        self.n = (npde, nbc, npc, nobs)
        # x-pass: pde | bc (x=0) | pc at t=0 | pc at t=T
        xs = np.concatenate([sets.pde_x, np.zeros(nbc), sets.pc_x, sets.pc_x])
        ts = np.concatenate([sets.pde_t, sets.bc_t, np.zeros(npc), np.full(npc, T)])
        self.feat_x = diffnet.input_features(template, xs, ts, "x")
        # t-pass: pde | pc at t=0 | pc at t=T | obs (x=L)
        xs = np.concatenate([sets.pde_x, sets.pc_x, sets.pc_x, np.full(nobs, L)])
        ts = np.concatenate([sets.pde_t, np.zeros(npc), np.full(npc, T), obs.times])
        self.feat_t = diffnet.input_features(template, xs, ts, "t")

        def coeffs(x):
            R, G = loss_coefficients(air, geom, x)
            return _t(geom.area(x)), _t(geom.area_slope(x)), _t(R), _t(G)

        self.c_pde = coeffs(sets.pde_x)
        self.c_pc = coeffs(sets.pc_x)
        self.c_L = coeffs(np.array([L]))
        self.A0 = float(geom.area(0.0))
        self.u_bc = _t(rosenberg_flow(sets.bc_t, source))
        self.p_obs = _t(obs.pressures)
        self._mixed_x = np.full(nobs, L)

    def evaluate(self, params: NetworkParams):
        jx = diffnet.trunk(params, self.feat_x)
        jt = diffnet.trunk(params, self.feat_t)
        npde, nbc, npc, nobs = self.n
        s_bc = slice(npde, npde + nbc)
        s_x0 = slice(npde + nbc, npde + nbc + npc)
        s_xT = slice(npde + nbc + npc, None)
        s_t0 = slice(npde, npde + npc)
        s_tT = slice(npde + npc, npde + 2 * npc)
        s_o = slice(npde + 2 * npc, None)
        pde = FieldEval(
            phi=jx.v[:npde], phi_x=jx.d1[:npde], phi_xx=jx.d2[:npde],
            phi_t=jt.d1[:npde], phi_tt=jt.d2[:npde],
        )
        return jx, jt, pde, (s_bc, s_x0, s_xT, s_t0, s_tT, s_o)

    def partial_losses(self, params: NetworkParams) -> dict:
        air = self.air
        jx, jt, pde, (s_bc, s_x0, s_xT, s_t0, s_tT, s_o) = self.evaluate(params)
        A, Ax, R, G = self.c_pde
        res = pde_residual(pde, A, Ax, R, G, air.rho, air.K, self.literal_sign)
        u_hat = -self.A0 * jx.d1[s_bc]
        Ac, _, Rc, _ = self.c_pc
        u0, uT = -Ac * jx.d1[s_x0], -Ac * jx.d1[s_xT]
        p0 = Rc * Ac * jt.v[s_t0] + air.rho * jt.d1[s_t0]
        pT = Rc * Ac * jt.v[s_tT] + air.rho * jt.d1[s_tT]
        AL, _, RL, _ = self.c_L
        p_hat = RL * AL * jt.v[s_o] + air.rho * jt.d1[s_o]
        pc_u, pc_p, pc_tt = loss_pc(u0, uT, p0, pT, jt.d2[s_t0], jt.d2[s_tT])
        return {
            "pde": _mse(res),
            "bc": loss_bc(u_hat, self.u_bc),
            "obs": loss_obs(p_hat, self.p_obs),
            "pc_u": pc_u,
            "pc_p": pc_p,
            "pc_phitt": pc_tt,
        }

    def boundary_signals(self, params: NetworkParams, times=None):
        """p, p_t, u_t at x = L from the mixed-derivative jets."""
        times = self.obs.times if times is None else np.asarray(times, dtype=float)
        ev = diffnet.evaluate_mixed(params, np.full(times.size, self.sets.length), times)
        AL, _, RL, _ = self.c_L
        rho = self.air.rho
        return ev.pressure(RL, AL, rho), ev.pressure_t(RL, AL, rho), ev.volume_velocity_t(AL)


# ---------------------------------------------------------------- optimizers


def lr_decay(epoch: int, lr_init: float) -> float:
    return lr_init / (1.0 + ADAM_DECAY * epoch)


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE))


def adam_step(state: AdamState, params: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    state.step += 1
    state.m.mul_(state.beta1).add_(grad, alpha=1 - state.beta1)
    state.v.mul_(state.beta2).addcmul_(grad, grad, value=1 - state.beta2)
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - lr * m_hat / (v_hat.sqrt() + state.eps)


@dataclass
class LbfgsState:
    history: int = 10
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    line_search_failures: int = 0

    def push(self, s, y):
        sy = float(y @ s)
        if sy <= 1e-10 * float(y @ y) or sy <= 0:
            return
        if len(self.s) == self.history:
            self.s.pop(0)
            self.y.pop(0)
            self.rho.pop(0)
        self.s.append(s)
        self.y.append(y)
        self.rho.append(1.0 / sy)


def two_loop(g: torch.Tensor, state: LbfgsState) -> torch.Tensor:
    """Search direction -H g from the stored curvature pairs."""
    q = g.clone()
    alphas = []
    for s, y, rho in zip(reversed(state.s), reversed(state.y), reversed(state.rho)):
        a = rho * float(s @ q)
        alphas.append(a)
        q.add_(y, alpha=-a)
    if state.s:
        gamma = float(state.s[-1] @ state.y[-1]) / float(state.y[-1] @ state.y[-1])
        q.mul_(gamma)
    for (s, y, rho), a in zip(zip(state.s, state.y, state.rho), reversed(alphas)):
        b = rho * float(y @ q)
        q.add_(s, alpha=a - b)
    return -q


def lbfgs_minimize(
    x0: torch.Tensor,
    closure: Callable[[torch.Tensor], tuple],
    epochs: int,
    state: LbfgsState | None = None,
    max_iter: int = 20,
    lr: float = 1.0,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_trials: int = 20,
    tolerance_grad: float = 1e-12,
    tolerance_change: float = 1e-14,
    on_epoch: Callable | None = None,
):
    """Limited-memory BFGS with a backtracking (sufficient decrease) line search.

    ``closure(x)`` returns ``(f, g)`` with ``f`` a float and ``g`` a flat
    tensor.  Each epoch runs at most ``max_iter`` iterations; the curvature
    history carries over between epochs.  Only steps that satisfy the
    sufficient-decrease condition are accepted, so ``f`` never increases.
    Returns ``(x, f, state)``.
    """
    state = state or LbfgsState()
    x = x0.clone()
    f, g = closure(x)
    for epoch in range(epochs):
        for _ in range(max_iter):
            if float(g.abs().max()) <= tolerance_grad:
                break
            d = two_loop(g, state)
            gd = float(g @ d)
            if gd >= 0:
                # not a descent direction: restart from steepest descent
                state.s.clear(), state.y.clear(), state.rho.clear()
                d = -g
                gd = float(g @ d)
            step = lr if state.s else lr * min(1.0, 1.0 / float(g.abs().sum()))
            for _trial in range(max_trials):
                x_new = x + step * d
                f_new, g_new = closure(x_new)
                if math.isfinite(f_new) and f_new <= f + c1 * step * gd:
                    break
                step *= shrink
            else:
                state.line_search_failures += 1
                log.warning("L-BFGS line search failed in epoch %d; stopping this epoch", epoch)
                break
            state.push(x_new - x, g_new - g)
            df = f - f_new
            x, f, g = x_new, f_new, g_new
            if df < tolerance_change * max(1.0, abs(f)):
                break
        if on_epoch is not None:
            on_epoch(epoch, x, f)
    return x, f, state


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    adam_epochs: int = 20000
    adam_lr: float = 1e-2
    lbfgs_epochs: int = 3000
    lbfgs_lr: float = 1.0
    lbfgs_max_iter: int = 20
    lbfgs_history: int = 10
    checkpoint_every: int = 1000


LOG_TERMS = ("pde", "bc", "obs", "pc_u", "pc_p", "pc_phitt")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, epoch, phase, lr, terms: dict, total: float):
        row = {"epoch": epoch, "phase": phase, "lr": lr}
        row.update({k: float(terms[k]) for k in LOG_TERMS})
        row["total"] = float(total)
        self.rows.append(row)

    @property
    def totals(self):
        return np.array([r["total"] for r in self.rows])


class LossClosure:
    """Flat-vector view of the weighted loss for the optimizers."""

    def __init__(self, problem: PinnProblem, template: NetworkParams, weights: LossWeights):
        self.problem, self.template, self.weights = problem, template, weights
        self.last_terms = None

    def params_of(self, vec):
        return self.template.with_flat(vec)

    def __call__(self, vec: torch.Tensor):
        params = self.params_of(vec).requires_grad_()
        partials = self.problem.partial_losses(params)
        terms = weighted_terms(partials, self.weights)
        total = total_loss(partials, self.weights)
        grads = loss_gradient(params.tensors(), total, terms)
        self.last_terms = {k: float(v.detach()) for k, v in terms.items()}
        return float(total.detach()), torch.cat([g.reshape(-1) for g in grads])


def train_gamma(
    problem: PinnProblem,
    params: NetworkParams,
    weights: LossWeights,
    cfg: TrainConfig,
    report: TrainReport | None = None,
    adam_state: AdamState | None = None,
    start_epoch: int = 0,
    checkpoint: Callable | None = None,
):
    """Full-batch Adam with 1/(1 + 0.007 i) decay, then L-BFGS.

    ``checkpoint(epoch, vec, adam_state)`` is called every
    ``cfg.checkpoint_every`` Adam epochs; passing back the saved vector,
    state and epoch resumes the run bit for bit.
    Returns ``(params, report)``.
    """
    report = report or TrainReport()
    t0 = time.perf_counter()
    closure = LossClosure(problem, params, weights)
    vec = params.flat()
    adam = adam_state or AdamState.zeros(vec.numel())
    last_saved = start_epoch if start_epoch else None
    for epoch in range(start_epoch, cfg.adam_epochs):
        lr = lr_decay(epoch, cfg.adam_lr)
        f, g = closure(vec)
        if not math.isfinite(f):
            where = "none saved" if last_saved is None else f"last good checkpoint at epoch {last_saved}"
            raise diffnet.NumericError(f"non-finite loss at Adam epoch {epoch} ({where})")
        report.add(epoch, "adam", lr, closure.last_terms, f)
        vec = adam_step(adam, vec, g, lr)
        if epoch % 500 == 0:
            log.info("adam %6d  lr %.3e  loss %.6e", epoch, lr, f)
        if checkpoint is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(epoch + 1, vec, adam)
            last_saved = epoch + 1
    if cfg.lbfgs_epochs > 0:
        base = max(cfg.adam_epochs, start_epoch)

        def on_epoch(i, x, f):
            report.add(base + i, "lbfgs", cfg.lbfgs_lr, closure.last_terms, f)
            if i % 50 == 0:
                log.info("lbfgs %5d  loss %.6e", i, f)

        vec, _, _ = lbfgs_minimize(
            vec, closure, cfg.lbfgs_epochs,
            state=LbfgsState(history=cfg.lbfgs_history),
            max_iter=cfg.lbfgs_max_iter, lr=cfg.lbfgs_lr, on_epoch=on_epoch,
        )
    report.wall_clock += time.perf_counter() - t0
    return params.with_flat(vec), report
