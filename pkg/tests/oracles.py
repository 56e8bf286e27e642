"""Independent reference computations shared by the test modules."""

import numpy as np
import sympy as sp


def manufactured_problem(geom_r0, geom_r1, length, air, alpha, beta, period, lossless=False):
    """Symbolic forcing for phi* = cos(pi x / L) sin(2 pi t / T) on a conical tube.

    Returns numpy callables (phi_exact, forcing, radiation_forcing, source_flow).
    """
    x, t = sp.symbols("x t", real=True)
    r = geom_r0 + (geom_r1 - geom_r0) * x / length
    A = sp.pi * r**2
    S = 2 * sp.pi * r
    if lossless:
        R = G = sp.Integer(0)
    else:
        R = S / A**2 * sp.sqrt(air.omega_c * air.rho * air.mu / 2)
        G = S * (air.eta - 1) / (air.rho * air.c**2) * sp.sqrt(
            air.lambda_th * air.omega_c / (2 * air.cp * air.rho))
    K = air.rho * air.c**2
    phi = sp.cos(sp.pi * x / length) * sp.sin(2 * sp.pi * t / period)
    lhs = (sp.diff(phi, x, 2) + sp.diff(A, x) / A * sp.diff(phi, x) - G * R * phi
           - (G * air.rho / A + R * A / K) * sp.diff(phi, t) - air.rho / K * sp.diff(phi, t, 2))
    u = -A * sp.diff(phi, x)
    p = R * A * phi + air.rho * sp.diff(phi, t)
    rad = air.rho * air.c / A * sp.diff(u, t) - alpha * p - beta * sp.diff(p, t)
    f_phi = sp.lambdify((x, t), phi, "numpy")
    f_src = sp.lambdify((x, t), lhs, "numpy")
    f_rad = sp.lambdify(t, rad.subs(x, length), "numpy")
    f_u0 = sp.lambdify(t, u.subs(x, 0), "numpy")

    def as_array(fn):
        return lambda xx, tt: np.broadcast_to(fn(xx, tt), np.shape(xx)).astype(float)

    return as_array(f_phi), as_array(f_src), f_rad, f_u0
