import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tubefield import diffnet, fdm, inverse
from tubefield.inverse import DegenerateProblem, FtmConfig, TomProblem, ftm_train, tom_fit, tomb_fit

from .conftest import GT

SCALE = 1.2 * 343.0 / (math.pi * 0.02**2)


def signals(n=1000, seed=0):
    """Two-harmonic pressure and its exact time derivative on one period."""
    rng = np.random.default_rng(seed)
    w = 2 * math.pi * 261.6
    t = np.arange(n) / (n * 261.6)
    a = rng.normal(size=4)
    p = a[0] * np.sin(w * t) + a[1] * np.cos(w * t) + a[2] * np.sin(2 * w * t) + a[3] * np.cos(3 * w * t)
    p_t = w * (a[0] * np.cos(w * t) - a[1] * np.sin(w * t) + 2 * a[2] * np.cos(2 * w * t)
               - 3 * a[3] * np.sin(3 * w * t))
    return t, 60 * p, 60 * p_t


def exact_problem(alpha, beta, seed=0):
    t, p, p_t = signals(seed=seed)
    return TomProblem(t, p, p_t, (alpha * p + beta * p_t) / SCALE, SCALE)


# ---------------------------------------------------------------- TOM


def test_recovers_exact_coefficients():
    res = tom_fit(exact_problem(GT.alpha, GT.beta))
    assert abs(res.alpha_hat - GT.alpha) < 1e-10
    assert abs(res.beta_hat - GT.beta) < 1e-10
    assert res.method == "TOM"


def test_residual_is_orthogonal_to_design_columns():
    t, p, p_t = signals(seed=1)
    noise = np.random.default_rng(2).normal(size=t.size)
    prob = TomProblem(t, p, p_t, (1.5 * p + 0.3 * p_t + 5 * noise) / SCALE, SCALE)
    res = tom_fit(prob)
    assert 0 < res.alpha_hat < 5 and 0 < res.beta_hat < 5
    r = SCALE * prob.u_t - res.alpha_hat * p - res.beta_hat * p_t
    for col in (p, p_t):
        assert abs(r @ col) / (np.linalg.norm(r) * np.linalg.norm(col)) < 1e-10


@pytest.mark.parametrize("c", [-3.0, 1e-3, 250.0])
def test_scale_equivariance(c):
    base = exact_problem(2.0, 0.4, seed=3)
    base.u_t = base.u_t + 1e-4 * np.sin(np.arange(base.u_t.size))
    scaled = TomProblem(base.times, c * base.p, c * base.p_t, c * base.u_t, SCALE)
    a, b = tom_fit(base), tom_fit(scaled)
    assert math.isclose(a.alpha_hat, b.alpha_hat, rel_tol=1e-10)
    assert math.isclose(a.beta_hat, b.beta_hat, rel_tol=1e-10)


def test_negative_alpha_clamps_to_lower_bound():
    # flow rate biased so the unconstrained optimum has alpha < 0
    prob = exact_problem(-0.5, 0.7, seed=4)
    free = np.linalg.lstsq(np.column_stack([prob.p, prob.p_t]), SCALE * prob.u_t, rcond=None)[0]
    assert free[0] < 0
    res = tom_fit(prob)
    assert res.alpha_hat == 0.0
    assert 0 < res.beta_hat < 5
    # the clamped beta is the one-dimensional optimum along alpha = 0
    y = SCALE * prob.u_t
    assert math.isclose(res.beta_hat, (prob.p_t @ y) / (prob.p_t @ prob.p_t), rel_tol=1e-12)


def test_upper_bounds_are_respected():
    res = tom_fit(exact_problem(9.0, 7.0, seed=5))
    assert res.alpha_hat == 5.0 and res.beta_hat == 5.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.integers(0, 1000))
def test_estimates_always_inside_box(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    prob = exact_problem(alpha, beta, seed=seed)
    prob.u_t = prob.u_t + rng.normal(size=prob.u_t.size) * np.abs(prob.u_t).max()
    res = tom_fit(prob)
    assert 0 <= res.alpha_hat <= 5 and 0 <= res.beta_hat <= 5
    # no feasible point on a coarse grid does better
    D = np.column_stack([prob.p, prob.p_t])
    y = SCALE * prob.u_t
    best = min(np.sum((y - D @ np.array([a, b])) ** 2)
               for a in np.linspace(0, 5, 21) for b in np.linspace(0, 5, 21))
    assert res.residual**2 <= best * (1 + 1e-9)


def test_degenerate_design_raises():
    t, p, _ = signals()
    with pytest.raises(DegenerateProblem):
        tom_fit(TomProblem(t, p, 2 * p, p, SCALE))
    with pytest.raises(DegenerateProblem):
        tom_fit(TomProblem(t, np.zeros_like(p), p, p, SCALE))


def test_problem_validation():
    t, p, p_t = signals()
    with pytest.raises(ValueError):
        TomProblem(t, p[:-1], p_t, p_t, SCALE)
    with pytest.raises(ValueError):
        TomProblem(t, p, p_t, p_t, SCALE, bounds=((1, 0), (0, 5)))


def test_zero_flow_rate_gives_zero_coefficients(coarse_solution, geom):
    prob = inverse.fdm_tom_problem(coarse_solution, geom, 500)
    prob.u_t = np.zeros_like(prob.u_t)
    res = tom_fit(prob)
    assert (res.alpha_hat, res.beta_hat) == (0.0, 0.0)


def test_tomb_on_default_case(default_solution, geom):
    res = tomb_fit(default_solution, geom, gt=(GT.alpha, GT.beta))
    ea, eb = res.rel_errors
    assert ea < 1e-2 and eb < 1e-3
    assert res.method == "TOMB"


def test_tomb_is_stable_under_refinement(coarse_solution, geom, air, source):
    finer = fdm.run_to_steady_state(geom, air, source, GT.alpha, GT.beta, fdm.FdmConfig(nx=401))
    a, b = tomb_fit(coarse_solution, geom), tomb_fit(finer, geom)
    assert abs(a.alpha_hat - b.alpha_hat) / b.alpha_hat < 1e-3
    assert abs(a.beta_hat - b.beta_hat) / b.beta_hat < 1e-3


def test_result_serialization(tmp_path):
    res = tom_fit(exact_problem(1.0, 0.5), gt=(1.0, 0.5))
    trace = [{"epoch": 0, "alpha": 1.0, "beta": 1.0, "total_loss": 3.0}]
    res.trace = trace
    res.write(tmp_path / "r.json", tmp_path / "trace.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert set(d) == {"method", "alpha_hat", "beta_hat", "residual", "trace_csv_path", "gt", "rel_errors"}
    assert d["gt"] == {"alpha": 1.0, "beta": 0.5}
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["epoch", "alpha", "beta", "total_loss"] and len(rows) == 2


def test_network_signals_use_mixed_derivatives(tiny_problem, geom, air):
    _, params, _ = tiny_problem
    prob = inverse.tom_collect_signals(params, geom, air, 50)
    ev = diffnet.evaluate_mixed(params, np.full(50, geom.length), prob.times)
    A = float(geom.area(geom.length))
    np.testing.assert_array_equal(prob.u_t, (-A * ev.phi_xt).detach().numpy())
    assert prob.scale == air.rho * air.c / A


# ---------------------------------------------------------------- FTM


def _ftm(tiny_problem, **kw):
    problem, params, w = tiny_problem
    cfg = FtmConfig(**{"adam_epochs": 5, "lbfgs_epochs": 0, "lambda_rad": 1e-6, **kw})
    return ftm_train(params, problem, w, cfg)


def test_ftm_moves_both_parts(tiny_problem):
    res, state = _ftm(tiny_problem)
    assert (res.alpha_hat, res.beta_hat) != (1.0, 1.0)
    assert not state.params.equal(tiny_problem[1])
    assert len(res.trace) == 5 and res.trace[0]["alpha"] == 1.0
    assert state.adam_net.step == 5 and state.adam_rad.step == 5


def test_ftm_frozen_coefficients(tiny_problem):
    res, state = _ftm(tiny_problem, update_rad=False)
    assert (res.alpha_hat, res.beta_hat) == (1.0, 1.0)
    assert not state.params.equal(tiny_problem[1])
    assert state.adam_rad.step == 0


def test_ftm_frozen_network(tiny_problem):
    res, state = _ftm(tiny_problem, update_net=False)
    assert state.params.equal(tiny_problem[1])
    assert (res.alpha_hat, res.beta_hat) != (1.0, 1.0)


def test_ftm_lbfgs_updates_jointly(tiny_problem):
    res, state = _ftm(tiny_problem, adam_epochs=0, lbfgs_epochs=2, lbfgs_max_iter=3)
    assert (res.alpha_hat, res.beta_hat) != (1.0, 1.0)
    assert not state.params.equal(tiny_problem[1])
    assert [r["epoch"] for r in res.trace] == [0, 1]
    losses = [r["total_loss"] for r in res.trace]
    assert losses[1] <= losses[0]


def test_ftm_gradient_only_reaches_coefficients_through_radiation(tiny_problem):
    problem, params, w = tiny_problem
    obj = inverse.FtmObjective(problem, params, w, 0.0)
    vec = torch.cat([params.flat(), torch.tensor([1.0, 1.0], dtype=torch.float64)])
    _, g = obj(vec)
    assert torch.all(g[-2:] == 0)


def test_ftm_divergence_warning(tiny_problem):
    with pytest.warns(RuntimeWarning, match="radiation coefficients"):
        _ftm(tiny_problem, adam_epochs=2, rad_lr=50.0, update_net=False)


def test_ftm_non_finite_loss_aborts(tiny_problem):
    problem, params, w = tiny_problem
    bad = params.with_flat(params.flat())
    bad.weights[0][0, 0] = float("nan")
    with pytest.raises(diffnet.NumericError):
        ftm_train(bad, problem, w, FtmConfig(adam_epochs=1, lbfgs_epochs=0))
