"""Physical quantities of the lossy acoustic tube.

Everything here is a pure function of its inputs.  Arrays are accepted
wherever a scalar position or time is, and the same formulas are reused
unchanged by the finite-difference solver and by the network losses
(``torch`` tensors pass through the arithmetic as well).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_FREQUENCY = 261.6


@dataclass(frozen=True)
class AirProperties:
    """Gas constants.  The bulk modulus is derived as ``rho * c**2``."""

    rho: float = 1.2
    c: float = 343.0
    mu: float = 1.81e-5
    eta: float = 1.402
    lambda_th: float = 0.0262
    cp: float = 1005.0
    omega_c: float = 2.0 * math.pi * DEFAULT_FREQUENCY

    def __post_init__(self):
        for name in ("rho", "c", "eta", "lambda_th", "cp", "omega_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AirProperties.{name} must be positive")
        # mu = 0 is allowed so the lossless limit can be expressed.
        if self.mu < 0:
            raise ValueError("AirProperties.mu must be nonnegative")

    @property
    def K(self) -> float:
        return self.rho * self.c**2


class TubeGeometry:
    """Axisymmetric tube of length ``length`` with radius profile ``r(x)``.

    ``radius`` may be a constant, a callable ``r(x)`` (optionally paired with
    its analytic derivative ``radius_derivative``) or a sampled table built
    with :meth:`from_samples`.  Sampled profiles are interpolated linearly and
    their slope is taken from second-order central differences of the table
    (one-sided second order at the two ends), also interpolated linearly.
    """

    def __init__(
        self,
        length: float = 1.0,
        radius: float | Callable = 0.02,
        radius_derivative: Optional[Callable] = None,
    ):
        if not length > 0:
            raise ValueError("tube length must be positive")
        self.length = float(length)
        if callable(radius):
            self._r = radius
            if radius_derivative is None:
                h = 1e-6 * self.length
                radius_derivative = lambda x: (radius(x + h) - radius(x - h)) / (2 * h)
            self._dr = radius_derivative
        else:
            r0 = float(radius)
            self._r = lambda x: r0 + 0.0 * np.asarray(x, dtype=float)
            self._dr = lambda x: 0.0 * np.asarray(x, dtype=float)
        probe = self.radius(np.linspace(0.0, self.length, 257))
        if np.any(~(probe > 0)):
            raise ValueError("radius must be positive on [0, L]")
        self.uniform = not callable(radius)

    @classmethod
    def from_samples(cls, x: Sequence[float], r: Sequence[float]) -> "TubeGeometry":
        xs = np.asarray(x, dtype=float)
        rs = np.asarray(r, dtype=float)
        if xs.ndim != 1 or xs.shape != rs.shape or xs.size < 3:
            raise ValueError("sampled profile needs matching 1D tables of >= 3 points")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("profile abscissae must be strictly increasing")
        slope = np.gradient(rs, xs, edge_order=2)
        geom = cls(
            length=xs[-1] - xs[0],
            radius=lambda q: np.interp(q, xs - xs[0], rs),
            radius_derivative=lambda q: np.interp(q, xs - xs[0], slope),
        )
        geom.samples = (xs.copy(), rs.copy())
        return geom

    @classmethod
    def conical(cls, length: float, r0: float, r1: float) -> "TubeGeometry":
        k = (r1 - r0) / length
        return cls(length, lambda x: r0 + k * np.asarray(x, dtype=float),
                   lambda x: k + 0.0 * np.asarray(x, dtype=float))

    def radius(self, x):
        return np.asarray(self._r(x), dtype=float)

    def area(self, x):
        return math.pi * self.radius(x) ** 2

    def circumference(self, x):
        return 2.0 * math.pi * self.radius(x)

    def area_slope(self, x):
        """dA/dx = 2 pi r r'."""
        return 2.0 * math.pi * self.radius(x) * np.asarray(self._dr(x), dtype=float)


@dataclass(frozen=True)
class RadiationCoefficients:
    delta: float
    beta_c: float
    alpha: float
    beta: float


@dataclass(frozen=True)
class SourceWaveform:
    """Smoothed Rosenberg glottal flow.

    ``smooth_width`` is the standard deviation (seconds) of the Gaussian
    kernel the raw pulse is convolved with; zero disables smoothing.
    """

    U0: float = 5e-4
    T: float = 1.0 / DEFAULT_FREQUENCY
    tp_frac: float = 0.40
    tn_frac: float = 0.16
    smooth_width: float = 1.0 / DEFAULT_FREQUENCY / 200.0
    _coeffs: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.tp_frac > 0 and self.tn_frac > 0 and self.tp_frac + self.tn_frac <= 1):
            raise ValueError("need 0 < tp_frac, 0 < tn_frac and tp_frac + tn_frac <= 1")
        if not self.T > 0:
            raise ValueError("period must be positive")
        if self.smooth_width < 0:
            raise ValueError("smooth_width must be nonnegative")

    @property
    def Tp(self) -> float:
        return self.tp_frac * self.T

    @property
    def Tn(self) -> float:
        return self.tn_frac * self.T

    def mean_flow(self) -> float:
        """Period average (unchanged by the normalized smoothing kernel)."""
        return (0.5 * self.Tp + 2.0 * self.Tn / math.pi) * self.U0 / self.T

    def fourier_coefficients(self) -> np.ndarray:
        """Complex coefficients c_k, k >= 0, of the smoothed pulse."""
        if self._coeffs is None:
            object.__setattr__(self, "_coeffs", _rosenberg_coefficients(self))
        return self._coeffs


def _segment_integral(mu, a, b):
    """int_a^b exp(i mu s) ds, stable for mu -> 0."""
    z = mu * (b - a)
    return np.exp(1j * mu * a) * np.exp(0.5j * z) * np.sinc(z / (2 * np.pi)) * (b - a)


def _rosenberg_coefficients(src: SourceWaveform) -> np.ndarray:
    T, Tp, Tn, U0 = src.T, src.Tp, src.Tn, src.U0
    if src.smooth_width > 0:
        # Gaussian attenuation exp(-(w sigma)^2 / 2) drops below 1e-18 here.
        kmax = int(math.ceil(math.sqrt(2 * 41.5) * T / (2 * math.pi * src.smooth_width))) + 1
    else:
        kmax = 4096
    k = np.arange(kmax + 1)
    w = 2 * np.pi * k / T
    # Opening phase: (U0/2) (1 - cos(pi s / Tp)) on [0, Tp].
    a1 = np.pi / Tp
    rise = 0.5 * U0 * (
        _segment_integral(-w, 0.0, Tp)
        - 0.5 * (_segment_integral(a1 - w, 0.0, Tp) + _segment_integral(-a1 - w, 0.0, Tp))
    )
    # Closing phase: U0 cos(pi (s - Tp) / (2 Tn)) on [Tp, Tp + Tn].
    a2 = np.pi / (2 * Tn)
    ph = -a2 * Tp
    fall = 0.5 * U0 * (
        np.exp(1j * ph) * _segment_integral(a2 - w, Tp, Tp + Tn)
        + np.exp(-1j * ph) * _segment_integral(-a2 - w, Tp, Tp + Tn)
    )
    c = (rise + fall) / T
    c *= np.exp(-0.5 * (w * src.smooth_width) ** 2)
    return c


def rosenberg_pulse(t, src: SourceWaveform):
    """Unsmoothed Rosenberg-B pulse, taken modulo the period."""
    tau = np.mod(np.asarray(t, dtype=float), src.T)
    Tp, Tn, U0 = src.Tp, src.Tn, src.U0
    out = np.zeros_like(tau)
    rise = tau <= Tp
    fall = (tau > Tp) & (tau <= Tp + Tn)
    out[rise] = 0.5 * U0 * (1.0 - np.cos(np.pi * tau[rise] / Tp))
    out[fall] = U0 * np.cos(np.pi * (tau[fall] - Tp) / (2.0 * Tn))
    return out


def rosenberg_flow(t, src: SourceWaveform):
    """Volume velocity of the smoothed source at time(s) ``t`` (m^3/s)."""
    if src.smooth_width == 0:
        return rosenberg_pulse(t, src)
    c = src.fourier_coefficients()
    tau = np.mod(np.asarray(t, dtype=float), src.T)
    w = 2 * np.pi * np.arange(1, c.size) / src.T
    phase = np.multiply.outer(tau, w)
    val = c[0].real + 2.0 * (np.cos(phase) @ c[1:].real - np.sin(phase) @ c[1:].imag)
    return val


def rosenberg_flow_derivative(t, src: SourceWaveform):
    """du/dt of the smoothed source."""
    c = src.fourier_coefficients()
    tau = np.mod(np.asarray(t, dtype=float), src.T)
    w = 2 * np.pi * np.arange(1, c.size) / src.T
    phase = np.multiply.outer(tau, w)
    return -2.0 * (np.sin(phase) @ (w * c[1:].real) + np.cos(phase) @ (w * c[1:].imag))


def loss_coefficients(air: AirProperties, geom: TubeGeometry, x):
    """Viscous (R) and thermal (G) loss coefficients at position(s) ``x``."""
    A = geom.area(x)
    S = geom.circumference(x)
    R = S / A**2 * np.sqrt(air.omega_c * air.rho * air.mu / 2.0)
    G = S * (air.eta - 1.0) / (air.rho * air.c**2) * np.sqrt(
        air.lambda_th * air.omega_c / (2.0 * air.cp * air.rho)
    )
    return R, G


def radiation_from_taylor(delta: float, beta_c: float) -> RadiationCoefficients:
    """Map the Taylor impedance coefficients to the time-domain (Pade) pair."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    return RadiationCoefficients(delta, beta_c, 1.0 / delta, beta_c / delta**2)


def taylor_from_radiation(alpha: float, beta: float) -> tuple[float, float]:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    return 1.0 / alpha, beta / alpha**2


def pressure_from_potential(phi, phi_t, R, A, rho):
    return R * A * phi + rho * phi_t


def volume_velocity_from_potential(phi_x, A):
    return -A * phi_x
