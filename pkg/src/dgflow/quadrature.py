"""Quadrature on truncated boxes and the inner products built on top of it.

Every integral over R^d in the package goes through a :class:`QuadratureRule`.
Networks built from the bump activation are compactly supported, so a box
that covers all supports makes the truncation exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

MAX_GRID_NODES = 10**8


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError(f"box has empty interior: lower={lo}, upper={hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "Box":
        return cls(-half_width * np.ones(dim), half_width * np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


def default_box(clip_radius: float, dim: int) -> Box:
    """Box containing the support of every network with clip radius r.

    Neuron i is supported on |a x + c| < 1 with 1/r <= |a| and |c_j| <= r,
    hence |x_j| <= r (1 + r).
    """
    half = clip_radius * (1.0 + clip_radius) + 1.0
    return Box.cube(half, dim)


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray  # (N, d)
    weights: np.ndarray  # (N,)
    kind: str
    box: Box
    seed: Optional[int] = None
    axes: Optional[tuple] = None  # per-axis node coordinates for tensor rules

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def shape(self) -> tuple:
        if self.axes is None:
            raise ValueError("only tensor rules have a grid shape")
        return tuple(a.size for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        if self.axes is None:
            raise ValueError("only tensor rules have a grid spacing")
        return (self.box.upper - self.box.lower) / np.array(self.shape)


def tensor_grid(box: Box, m) -> QuadratureRule:
    """Composite midpoint rule with ``m`` points per axis (``m`` may be per-axis)."""
    d = box.dim
    ms = np.broadcast_to(np.asarray(m, dtype=int), (d,))
    if np.any(ms < 2):
        raise ValueError("need at least 2 points per axis")
    total = int(np.prod(ms.astype(float)))
    if total > MAX_GRID_NODES:
        raise ValueError(f"tensor grid with {total} nodes exceeds the {MAX_GRID_NODES} node limit")
    axes = []
    for j in range(d):
        step = (box.upper[j] - box.lower[j]) / ms[j]
        axes.append(box.lower[j] + step * (np.arange(ms[j]) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in mesh], axis=-1)
    cell = box.volume / total
    weights = np.full(total, cell)
    return QuadratureRule(nodes, weights, "grid", box, None, tuple(axes))


def monte_carlo(box: Box, n_points: int, seed: int) -> QuadratureRule:
    """``n_points`` i.i.d. uniform nodes with equal weights volume / N."""
    if n_points < 1:
        raise ValueError("need at least one Monte Carlo node")
    rng = np.random.default_rng(seed)
    nodes = rng.uniform(box.lower, box.upper, size=(n_points, box.dim))
    weights = np.full(n_points, box.volume / n_points)
    return QuadratureRule(nodes, weights, "mc", box, seed, None)


def integrate(f: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule) -> float:
    vals = np.asarray(f(rule.nodes), dtype=float).reshape(-1)
    if vals.shape != rule.weights.shape:
        raise ValueError(f"integrand returned shape {vals.shape}, expected {rule.weights.shape}")
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise FloatingPointError(f"non-finite integrand at node {bad}: {rule.nodes[bad]}")
    return float(np.sum(rule.weights * vals))


def mc_standard_error(f: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule) -> float:
    """Standard error of a Monte Carlo rule's estimate of the integral of ``f``."""
    vals = np.asarray(f(rule.nodes), dtype=float).reshape(-1)
    return float(rule.box.volume * np.std(vals, ddof=1) / np.sqrt(vals.size))


@dataclass
class NodeData:
    """Values (and optionally spatial gradients) of a function at the nodes of a rule."""

    values: np.ndarray  # (N,)
    grads: Optional[np.ndarray] = None  # (N, d)

    def __add__(self, other: "NodeData") -> "NodeData":
        g = None if self.grads is None or other.grads is None else self.grads + other.grads
        return NodeData(self.values + other.values, g)

    def __sub__(self, other: "NodeData") -> "NodeData":
        g = None if self.grads is None or other.grads is None else self.grads - other.grads
        return NodeData(self.values - other.values, g)

    def __mul__(self, a: float) -> "NodeData":
        return NodeData(a * self.values, None if self.grads is None else a * self.grads)

    __rmul__ = __mul__

    @classmethod
    def of(cls, fn, nodes: np.ndarray, with_grads: bool = True) -> "NodeData":
        """Sample an evaluable (anything with ``values``/``gradients``)."""
        vals = np.asarray(fn.values(nodes), dtype=float)
        grads = np.asarray(fn.gradients(nodes), dtype=float) if with_grads else None
        return cls(vals, grads)


MODES = ("L2", "H1", "A", "Htilde")


def inner_product(u: NodeData, v: NodeData, rule: QuadratureRule, mode: str = "L2",
                  spec=None, h: Optional[float] = None) -> float:
    """<u, v> in one of the modes L2, H1, A (bilinear form of ``spec``), Htilde.

    Htilde is <u, v>_L2 + h a(u, v).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    w = rule.weights
    if mode == "L2":
        return float(np.sum(w * u.values * v.values))
    if u.grads is None or v.grads is None:
        raise ValueError(f"mode {mode!r} needs gradient data for both arguments")
    if mode == "H1":
        return float(np.sum(w * (u.values * v.values + np.einsum("ij,ij->i", u.grads, v.grads))))
    if spec is None:
        raise ValueError(f"mode {mode!r} needs an operator spec")
    a = spec.bilinear_nodes(u, v, rule)
    if mode == "A":
        return a
    if h is None:
        raise ValueError("Htilde mode needs the time step h")
    return float(np.sum(w * u.values * v.values)) + h * a


def norm(u: NodeData, rule: QuadratureRule, mode: str = "L2", spec=None, h=None) -> float:
    return float(np.sqrt(max(inner_product(u, u, rule, mode, spec, h), 0.0)))


# --- grid functions -------------------------------------------------------


def _axis_ops(m: int, step: float):
    """Zero-extended difference and averaging operators from m nodes to m+1 cells."""
    diff = sparse.diags([np.ones(m), -np.ones(m)], [0, -1], shape=(m + 1, m)) / step
    avg = sparse.diags([0.5 * np.ones(m), 0.5 * np.ones(m)], [0, -1], shape=(m + 1, m))
    return diff.tocsr(), avg.tocsr()


@dataclass
class GridCalculus:
    """Piecewise (multi)linear gradient reconstruction on a tensor rule.

    Grid functions are extended by zero outside the box.  ``grad_ops[j]`` maps
    node values to the j-th partial derivative at the (m+1)^d cell centres.
    """

    rule: QuadratureRule
    grad_ops: list = field(default_factory=list)
    cell_centres: np.ndarray = None
    cell_volume: float = 0.0

    @classmethod
    def build(cls, rule: QuadratureRule) -> "GridCalculus":
        if rule.axes is None:
            raise ValueError("grid calculus needs a tensor rule")
        shape = rule.shape
        step = rule.spacing
        d = len(shape)
        ops = [_axis_ops(m, s) for m, s in zip(shape, step)]
        grads = []
        for j in range(d):
            mat = None
            for k in range(d):
                piece = ops[k][0] if k == j else ops[k][1]
                mat = piece if mat is None else sparse.kron(mat, piece, format="csr")
            grads.append(mat.tocsr())
        centre_axes = [rule.box.lower[j] + step[j] * np.arange(shape[j] + 1) for j in range(d)]
        mesh = np.meshgrid(*centre_axes, indexing="ij")
        centres = np.stack([g.ravel() for g in mesh], axis=-1)
        return cls(rule, grads, centres, float(np.prod(step)))

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Cell-centre gradient, shape (n_cells, d)."""
        return np.stack([op @ values for op in self.grad_ops], axis=-1)

    def stiffness(self, coeff: Optional[np.ndarray] = None):
        """Matrix of u -> int grad(u)^T A grad(v); ``coeff`` is A at cell centres (n_cells, d, d)."""
        d = len(self.grad_ops)
        n_cells = self.cell_centres.shape[0]
        if coeff is None:
            coeff = np.broadcast_to(np.eye(d), (n_cells, d, d))
        total = None
        for i in range(d):
            for j in range(d):
                wdiag = sparse.diags(self.cell_volume * coeff[:, i, j])
                piece = self.grad_ops[i].T @ wdiag @ self.grad_ops[j]
                total = piece if total is None else total + piece
        return total.tocsr()

    def mass(self, coeff: Optional[np.ndarray] = None):
        w = self.rule.weights if coeff is None else self.rule.weights * coeff
        return sparse.diags(w).tocsr()

    def h1_gram(self):
        return (self.mass() + self.stiffness()).tocsr()
