"""Second-order Taylor jets along one input direction.

A :class:`Jet2` carries ``(v, d1, d2)``: a value and its first and second
derivatives along a fixed direction.  Components may be numpy arrays, torch
tensors or, for mixed derivatives, jets themselves (a t-jet whose components
are x-jets carries phi, phi_x, phi_t, phi_xt, ...).  ``d2=None`` truncates a
jet to first order.
"""

from __future__ import annotations

import numpy as np
import torch


def _is_jet(z):
    return isinstance(z, Jet2)


def sin(z):
    if _is_jet(z):
        return z.sin()
    return torch.sin(z) if isinstance(z, torch.Tensor) else np.sin(z)


def cos(z):
    if _is_jet(z):
        return z.cos()
    return torch.cos(z) if isinstance(z, torch.Tensor) else np.cos(z)


def _add(a, b):
    if a is None or b is None:
        return None
    return a + b


class Jet2:
    __slots__ = ("v", "d1", "d2")

    def __init__(self, v, d1, d2=None):
        self.v = v
        self.d1 = d1
        self.d2 = d2

    @classmethod
    def variable(cls, v, rate, order=2):
        """Affine input ``v`` whose derivative along the direction is ``rate``."""
        d1 = rate * ones_like(v)
        d2 = 0 * d1 if order == 2 else None
        return cls(v, d1, d2)

    @classmethod
    def constant(cls, v, order=2):
        z = 0 * v
        return cls(v, z, z if order == 2 else None)

    @property
    def order(self):
        return 1 if self.d2 is None else 2

    # elementwise chain rule: f(v), f'(v), f''(v)
    def apply(self, f0, f1, f2):
        d2 = None if self.d2 is None else f2 * self.d1 * self.d1 + f1 * self.d2
        return Jet2(f0, f1 * self.d1, d2)

    def sin(self):
        s, c = sin(self.v), cos(self.v)
        return self.apply(s, c, -s)

    def cos(self):
        s, c = sin(self.v), cos(self.v)
        return self.apply(c, -s, -c)

    def __add__(self, other):
        if _is_jet(other):
            return Jet2(self.v + other.v, self.d1 + other.d1, _add(self.d2, other.d2))
        return Jet2(self.v + other, self.d1, self.d2)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.v, -self.d1, None if self.d2 is None else -self.d2)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if _is_jet(other):
            d2 = None
            if self.d2 is not None and other.d2 is not None:
                d2 = self.d2 * other.v + 2 * self.d1 * other.d1 + self.v * other.d2
            return Jet2(self.v * other.v, self.d1 * other.v + self.v * other.d1, d2)
        return Jet2(self.v * other, self.d1 * other, None if self.d2 is None else self.d2 * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_jet(other):
            raise TypeError("division by a jet is not supported")
        return self * (1.0 / other)

    def __matmul__(self, w):
        return Jet2(self.v @ w, self.d1 @ w, None if self.d2 is None else self.d2 @ w)

    def __getitem__(self, idx):
        return Jet2(self.v[idx], self.d1[idx], None if self.d2 is None else self.d2[idx])

    def __repr__(self):
        return f"Jet2(v={self.v!r}, d1={self.d1!r}, d2={self.d2!r})"


def ones_like(v):
    if _is_jet(v):
        return Jet2.constant(ones_like(v.v), v.order)
    if isinstance(v, torch.Tensor):
        return torch.ones_like(v)
    return np.ones_like(v)


def cat(items, dim=-1):
    """Concatenate jets (possibly nested) or tensors along ``dim``."""
    if not _is_jet(items[0]):
        return torch.cat(items, dim=dim)
    v = cat([j.v for j in items], dim)
    d1 = cat([j.d1 for j in items], dim)
    if any(j.d2 is None for j in items):
        return Jet2(v, d1, None)
    return Jet2(v, d1, cat([j.d2 for j in items], dim))


def linear(z, weight, bias):
    """Affine layer ``z @ W^T + b``; the bias only touches the value."""
    if _is_jet(z):
        out = z @ weight.T
        return Jet2(out.v + bias, out.d1, out.d2)
    return z @ weight.T + bias


class _SnakeJet(torch.autograd.Function):
    """Snake on a tensor-valued jet with a hand-written backward.

    In terms of s = sin(2az), c = cos(2az): f = z + (1 - c) / 2a,
    df = 1 + s, d2f = 2a c, d3f = -4a^2 s.
    """

    @staticmethod
    def forward(ctx, z, d1, d2, a):
        s2 = torch.sin((2 * a) * z)
        c2 = torch.cos((2 * a) * z)
        f1 = 1 + s2
        o0 = z + (1 - c2) / (2 * a)
        o1 = f1 * d1
        ctx.a = a
        if d2 is None:
            ctx.save_for_backward(s2, c2, d1)
            return o0, o1
        o2 = torch.addcmul(f1 * d2, (2 * a) * c2 * d1, d1)
        ctx.save_for_backward(s2, c2, d1, d2)
        return o0, o1, o2

    @staticmethod
    def backward(ctx, g0, g1, g2=None):
        a = ctx.a
        if len(ctx.saved_tensors) == 3:
            s2, c2, d1 = ctx.saved_tensors
            f1 = 1 + s2
            dz = g0 * f1 + g1 * ((2 * a) * c2 * d1)
            return dz, g1 * f1, None, None
        s2, c2, d1, d2 = ctx.saved_tensors
        f1 = 1 + s2
        f2 = (2 * a) * c2
        f2d1 = f2 * d1
        dz = g0 * f1 + g1 * f2d1 + g2 * ((-4 * a * a) * s2 * d1 * d1 + f2 * d2)
        dd1 = g1 * f1 + 2 * g2 * f2d1
        return dz, dd1, g2 * f1, None


def snake(z, a=1.0):
    """Snake activation z + sin(a z)^2 / a, propagated through jets."""
    if not _is_jet(z):
        s = sin(a * z)
        return z + s * s / a
    if isinstance(z.v, torch.Tensor):
        out = _SnakeJet.apply(z.v, z.d1, z.d2, a)
        return Jet2(out[0], out[1], out[2] if len(out) == 3 else None)
    s, c = sin(a * z.v), cos(a * z.v)
    f0 = z.v + s * s / a
    f1 = 1 + 2 * s * c  # 1 + sin(2az)
    f2 = 2 * a * (c * c - s * s)  # 2a cos(2az)
    return z.apply(f0, f1, f2)
