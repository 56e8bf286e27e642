import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from tubefield.physics import (
    AirProperties,
    SourceWaveform,
    TubeGeometry,
    loss_coefficients,
    pressure_from_potential,
    radiation_from_taylor,
    rosenberg_flow,
    rosenberg_flow_derivative,
    rosenberg_pulse,
    taylor_from_radiation,
    volume_velocity_from_potential,
)

AIR = AirProperties()
GEOM = TubeGeometry(1.0, 0.02)


def test_bulk_modulus_matches_rho_c2():
    assert math.isclose(AIR.K, AIR.rho * AIR.c**2, rel_tol=1e-12)


@pytest.mark.parametrize("name", ["rho", "c", "eta", "lambda_th", "cp", "omega_c"])
def test_air_rejects_nonpositive(name):
    with pytest.raises(ValueError):
        AirProperties(**{name: 0.0})


def test_geometry_derived_quantities():
    x = np.linspace(0, 1, 11)
    geom = TubeGeometry.conical(1.0, 0.02, 0.03)
    r = geom.radius(x)
    np.testing.assert_allclose(geom.area(x), np.pi * r**2, rtol=1e-15)
    np.testing.assert_allclose(geom.circumference(x), 2 * np.pi * r, rtol=1e-15)
    np.testing.assert_allclose(geom.area_slope(x), 2 * np.pi * r * 0.01, rtol=1e-14)


def test_sampled_profile_slope_is_exact_for_quadratics():
    xs = np.linspace(0, 1, 41)
    geom = TubeGeometry.from_samples(xs, 0.02 + 0.01 * xs**2)
    # second-order stencils differentiate quadratics exactly at the nodes
    np.testing.assert_allclose(geom._dr(xs), 0.02 * xs, atol=1e-14)


def test_geometry_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        TubeGeometry(1.0, lambda x: 0.01 - 0.02 * np.asarray(x))


def test_loss_coefficients_oracle():
    # direct one-line evaluation, independent of the implementation
    r = 0.02
    A, S = math.pi * r * r, 2 * math.pi * r
    w = 2 * math.pi * 261.6
    R_ref = S / A**2 * math.sqrt(w * 1.2 * 1.81e-5 / 2)
    G_ref = S * (1.402 - 1) / (1.2 * 343.0**2) * math.sqrt(0.0262 * w / (2 * 1005.0 * 1.2))
    R, G = loss_coefficients(AIR, GEOM, 0.3)
    assert math.isclose(float(R), R_ref, rel_tol=1e-13)
    assert math.isclose(float(G), G_ref, rel_tol=1e-13)


def test_loss_coefficients_vanish():
    R, _ = loss_coefficients(AirProperties(mu=0.0), GEOM, 0.5)
    _, G = loss_coefficients(AirProperties(eta=1.0 + 1e-300), GEOM, 0.5)
    assert R == 0.0
    assert abs(G) < 1e-300


def test_loss_coefficient_square_root_scaling():
    R1, G1 = loss_coefficients(AIR, GEOM, 0.5)
    R2, _ = loss_coefficients(AirProperties(mu=2 * AIR.mu), GEOM, 0.5)
    _, G2 = loss_coefficients(AirProperties(lambda_th=2 * AIR.lambda_th), GEOM, 0.5)
    assert math.isclose(R2 / R1, math.sqrt(2), rel_tol=1e-12)
    assert math.isclose(G2 / G1, math.sqrt(2), rel_tol=1e-12)


@pytest.mark.parametrize(
    "delta,beta_c,alpha,beta",
    [(1.0, 0.0, 1.0, 0.0), (0.5, 0.25, 2.0, 1.0)],
)
def test_radiation_map_exact_cases(delta, beta_c, alpha, beta):
    rc = radiation_from_taylor(delta, beta_c)
    assert (rc.alpha, rc.beta) == (alpha, beta)


def test_radiation_map_flanged_values():
    rc = radiation_from_taylor(0.8236, 0.5)
    assert f"{rc.alpha:.4f}" == "1.2142"
    assert f"{rc.beta:.4f}" == "0.7371"


@pytest.mark.parametrize("delta", [0.0, -1.0])
def test_radiation_map_rejects_nonpositive_delta(delta):
    with pytest.raises(ValueError):
        radiation_from_taylor(delta, 0.5)


@given(st.floats(0.01, 100.0), st.floats(0.0, 100.0))
def test_radiation_map_round_trip(alpha, beta):
    delta, beta_c = taylor_from_radiation(alpha, beta)
    rc = radiation_from_taylor(delta, beta_c)
    assert math.isclose(rc.alpha, alpha, rel_tol=1e-12)
    assert math.isclose(rc.beta, beta, rel_tol=1e-12, abs_tol=1e-300)


def test_rosenberg_raw_pulse_shape():
    src = SourceWaveform(smooth_width=0.0)
    assert math.isclose(float(rosenberg_pulse(src.Tp, src)), src.U0, rel_tol=1e-15)
    assert float(rosenberg_pulse(0.0, src)) == 0.0
    assert float(rosenberg_pulse(0.8 * src.T, src)) == 0.0


def test_smoothed_flow_closed_phase_is_zero():
    src = SourceWaveform()
    t = src.T * np.linspace(0.65, 0.95, 50)
    assert np.abs(rosenberg_flow(t, src)).max() < 1e-9 * src.U0


def test_smoothed_flow_matches_direct_convolution():
    src = SourceWaveform()
    n = 1 << 16
    t = np.arange(n) * src.T / n
    raw = rosenberg_pulse(t, src)
    # periodic Gaussian kernel, normalized on the grid
    d = (t + src.T / 2) % src.T - src.T / 2
    kern = np.exp(-0.5 * (d / src.smooth_width) ** 2)
    kern /= kern.sum()
    conv = np.real(np.fft.ifft(np.fft.fft(raw) * np.fft.fft(kern)))
    np.testing.assert_allclose(rosenberg_flow(t[::64], src), conv[::64], atol=1e-7 * src.U0)


def test_flow_mean_matches_quadrature():
    src = SourceWaveform()
    t = np.linspace(0, src.T, 100001)
    mean = trapezoid(rosenberg_flow(t, src), t) / src.T
    assert math.isclose(mean, src.mean_flow(), rel_tol=1e-6)


def test_flow_is_periodic():
    src = SourceWaveform()
    t = np.random.default_rng(0).uniform(-3 * src.T, 3 * src.T, 1000)
    diff = rosenberg_flow(t, src) - rosenberg_flow(t + src.T, src)
    assert np.abs(diff).max() < 1e-12 * src.U0


def test_flow_derivative_matches_finite_differences():
    src = SourceWaveform()
    t = np.linspace(0, src.T, 97)
    h = src.T * 1e-6
    fd = (rosenberg_flow(t + h, src) - rosenberg_flow(t - h, src)) / (2 * h)
    scale = np.abs(fd).max()
    np.testing.assert_allclose(rosenberg_flow_derivative(t, src), fd, atol=1e-6 * scale)


@pytest.mark.parametrize("kw", [{"tp_frac": 0.0}, {"tp_frac": 0.7, "tn_frac": 0.4}, {"T": -1.0}])
def test_source_validation(kw):
    with pytest.raises(ValueError):
        SourceWaveform(**kw)


def test_potential_conversions_exact():
    assert pressure_from_potential(0.0, 0.0, 5, 7, 11) == 0.0
    assert pressure_from_potential(2, 3, 0, 7, 11) == 33
    assert pressure_from_potential(2, 3, 5, 7, 11) == 103
    assert volume_velocity_from_potential(0.0, 2) == 0.0
    assert volume_velocity_from_potential(-1, 2) == 2
    assert volume_velocity_from_potential(3, 0.5) == -1.5


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_potential_conversions_linear(c):
    a, b = c[0], c[1]
    phi1, phi2, pt1, pt2, px1, px2 = 1.3, -0.2, c[2], c[3], c[4], c[5]
    R, A, rho = 3.0, 0.5, 1.2
    lhs = pressure_from_potential(a * phi1 + b * phi2, a * pt1 + b * pt2, R, A, rho)
    rhs = a * pressure_from_potential(phi1, pt1, R, A, rho) + b * pressure_from_potential(phi2, pt2, R, A, rho)
    assert math.isclose(lhs, rhs, rel_tol=1e-12, abs_tol=1e-11)
    lhs = volume_velocity_from_potential(a * px1 + b * px2, A)
    rhs = a * volume_velocity_from_potential(px1, A) + b * volume_velocity_from_potential(px2, A)
    assert math.isclose(lhs, rhs, rel_tol=1e-12, abs_tol=1e-11)
