"""Closed-form evaluables used as initial data and test functions."""

from __future__ import annotations

import numpy as np

from .activation import bump


def _points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    return x


class BumpFunction:
    """u(x) = height * w((x - centre) / width) for the unit-mass bump w."""

    def __init__(self, dim: int = 1, centre=0.0, width: float = 1.0, height: float = 1.0):
        self.dim = dim
        self.centre = np.broadcast_to(np.asarray(centre, dtype=float), (dim,)).copy()
        self.width = float(width)
        self.height = float(height)
        if self.width <= 0:
            raise ValueError("bump width must be positive")

    def support_radius(self) -> float:
        return self.width

    def values(self, x):
        x = _points(x, self.dim)
        return self.height * bump(self.dim).value((x - self.centre) / self.width)

    def gradients(self, x):
        x = _points(x, self.dim)
        return (self.height / self.width) * bump(self.dim).grad((x - self.centre) / self.width)

    def as_dict(self) -> dict:
        return {"kind": "bump", "centre": self.centre.tolist(), "width": self.width, "height": self.height}


class ZeroFunction:
    def __init__(self, dim: int = 1):
        self.dim = dim

    def values(self, x):
        return np.zeros(_points(x, self.dim).shape[0])

    def gradients(self, x):
        return np.zeros_like(_points(x, self.dim))


class ConstantFunction:
    """Constant value (only meaningful as a local test function)."""

    def __init__(self, value: float, dim: int = 1):
        self.value, self.dim = float(value), dim

    def values(self, x):
        return np.full(_points(x, self.dim).shape[0], self.value)

    def gradients(self, x):
        return np.zeros_like(_points(x, self.dim))


class GaussianDensity:
    """Isotropic normal density N(mean, var I); exact under heat flow."""

    def __init__(self, var: float, dim: int = 1, mean=0.0):
        self.var, self.dim = float(var), dim
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()

    def values(self, x):
        x = _points(x, self.dim) - self.mean
        r2 = np.einsum("ij,ij->i", x, x)
        return np.exp(-0.5 * r2 / self.var) / (2 * np.pi * self.var) ** (self.dim / 2)

    def gradients(self, x):
        x = _points(x, self.dim)
        return -(x - self.mean) / self.var * self.values(x)[:, None]


class SumFunction:
    def __init__(self, *parts):
        self.parts = parts
        self.dim = parts[0].dim

    def values(self, x):
        return sum(p.values(x) for p in self.parts)

    def gradients(self, x):
        return sum(p.gradients(x) for p in self.parts)


class GridInterpolant:
    """Piecewise-linear interpolant of node values on a 1-d tensor rule (zero outside)."""

    def __init__(self, axis: np.ndarray, values: np.ndarray, lower: float, upper: float):
        self.dim = 1
        self.x = np.concatenate([[lower], axis, [upper]])
        self.v = np.concatenate([[0.0], values, [0.0]])

    def values(self, x):
        x = _points(x, 1)[:, 0]
        return np.interp(x, self.x, self.v, left=0.0, right=0.0)

    def gradients(self, x):
        x = _points(x, 1)[:, 0]
        slopes = np.diff(self.v) / np.diff(self.x)
        idx = np.clip(np.searchsorted(self.x, x, side="right") - 1, 0, slopes.size - 1)
        inside = (x >= self.x[0]) & (x < self.x[-1])
        return np.where(inside, slopes[idx], 0.0)[:, None]
