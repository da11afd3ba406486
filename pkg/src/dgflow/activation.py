"""Compactly supported bump activation.

The activation is the radial mollifier

    w(x) = c * exp(-1 / (1 - |x|^2))   for |x| < 1,   0 otherwise,

normalised so that its integral over R^d equals one.  All routines are
vectorised over leading axes: a batch of points has shape ``(..., d)``.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy import integrate

# Points this close to the unit sphere are treated as outside the support;
# exp(-1/(1-s)) is far below double precision there anyway.
BOUNDARY_EPS = 1e-12


def _radial_mass(dim: int) -> float:
    """Integral of exp(-1/(1-|x|^2)) over the unit ball in R^dim."""
    sphere = 2.0 * math.pi ** (dim / 2) / math.gamma(dim / 2)

    def integrand(r):
        if r >= 1.0 - BOUNDARY_EPS:
            return 0.0
        return r ** (dim - 1) * math.exp(-1.0 / (1.0 - r * r))

    val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    return sphere * val


class BumpActivation:
    """Unit-mass bump on the unit ball of R^dim."""

    support_radius = 1.0

    def __init__(self, dim: int = 1):
        if int(dim) != dim or dim < 1:
            raise ValueError(f"dim must be a positive integer, got {dim!r}")
        self.dim = int(dim)
        self.norm_const = 1.0 / _radial_mass(self.dim)

    def __repr__(self):
        return f"BumpActivation(dim={self.dim}, norm_const={self.norm_const:.12g})"

    def _prep(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            if self.dim == 1:
                x = x[..., None]
            else:
                raise ValueError(f"expected trailing axis of size {self.dim}, got shape {x.shape}")
        s = np.einsum("...i,...i->...", x, x)
        inside = s < 1.0 - BOUNDARY_EPS
        gap = np.where(inside, 1.0 - s, 1.0)
        val = np.where(inside, self.norm_const * np.exp(-1.0 / gap), 0.0)
        return x, gap, val

    def value(self, x):
        """w(x); shape ``x.shape[:-1]``."""
        _, _, val = self._prep(x)
        return val

    def grad(self, x):
        """Gradient w(x) * (-2x / (1-|x|^2)^2); shape ``(..., d)``."""
        x, gap, val = self._prep(x)
        return (val * (-2.0 / gap**2))[..., None] * x

    def hess(self, x):
        """Hessian of w; shape ``(..., d, d)``."""
        x, gap, val = self._prep(x)
        g = (-2.0 / gap**2)[..., None] * x
        outer_g = g[..., :, None] * g[..., None, :]
        outer_x = x[..., :, None] * x[..., None, :]
        eye = np.eye(self.dim)
        h = outer_g - (2.0 / gap**2)[..., None, None] * eye - (8.0 / gap**3)[..., None, None] * outer_x
        return val[..., None, None] * h

    def all_derivatives(self, x):
        """Value, gradient and Hessian in one pass (shares the exponential)."""
        x, gap, val = self._prep(x)
        inv2 = 1.0 / gap**2
        g = (-2.0 * inv2)[..., None] * x
        grad = val[..., None] * g
        outer_g = g[..., :, None] * g[..., None, :]
        outer_x = x[..., :, None] * x[..., None, :]
        h = outer_g - (2.0 * inv2)[..., None, None] * np.eye(self.dim) - (8.0 / gap**3)[..., None, None] * outer_x
        return val, grad, val[..., None, None] * h


@functools.lru_cache(maxsize=None)
def bump(dim: int) -> BumpActivation:
    """Shared activation instance for a dimension (normalisation is computed once)."""
    return BumpActivation(dim)


def bump_eval(act: BumpActivation, x):
    return act.value(x)


def bump_grad(act: BumpActivation, x):
    return act.grad(x)


def bump_hess(act: BumpActivation, x):
    return act.hess(x)
