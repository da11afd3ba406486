"""Ground-truth solutions and error tables.

heat_exact convolves the initial datum with the Gaussian heat kernel by
dense trapezoidal quadrature, doubling the node count until successive
values agree to ``tol``.  Black-Scholes (in log price) reduces to the heat
equation by a discount-and-shift substitution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .quadrature import Box, NodeData, QuadratureRule

WINDOW = 12.0  # standard deviations covered by the kernel variable
MAX_NODES = 2**16


class ConvergenceError(RuntimeError):
    pass


def _points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    return x


def _support(u0):
    if hasattr(u0, "centre") and hasattr(u0, "width"):
        return u0.centre, u0.width
    return None


def _kernel_pass(u0, x, sd, m, grad):
    """Trapezoid in the kernel variable: E[u0(x + sd Z)] on [-WINDOW, WINDOW]^d."""
    d = x.shape[1]
    s = np.linspace(-WINDOW, WINDOW, m + 1)
    w1 = np.full(m + 1, 2 * WINDOW / m)
    w1[[0, -1]] *= 0.5
    w1 = w1 * np.exp(-0.5 * s * s) / math.sqrt(2 * math.pi)
    mesh = np.meshgrid(*([s] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=-1)
    wts = np.ones(pts.shape[0])
    for j in range(d):
        wts = wts * np.meshgrid(*([w1] * d), indexing="ij")[j].ravel()
    out_v = np.empty(x.shape[0])
    out_g = np.empty(x.shape) if grad else None
    chunk = max(1, 2_000_000 // pts.shape[0])
    for lo in range(0, x.shape[0], chunk):
        xi = x[lo:lo + chunk]
        y = (xi[:, None, :] + sd * pts[None, :, :]).reshape(-1, d)
        out_v[lo:lo + chunk] = u0.values(y).reshape(xi.shape[0], -1) @ wts
        if grad:
            g = u0.gradients(y).reshape(xi.shape[0], -1, d)
            out_g[lo:lo + chunk] = np.einsum("ipk,p->ik", g, wts)
    return out_v, out_g


def _support_pass(u0, x, var, centre, width, m, grad):
    """Trapezoid over the support box of u0 with the Gaussian kernel as weight."""
    d = x.shape[1]
    axes = [np.linspace(centre[j] - width, centre[j] + width, m + 1) for j in range(d)]
    step = 2 * width / m
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=-1)
    u = u0.values(pts) * step**d  # u0 vanishes at the support boundary, so end weights are irrelevant
    diff = x[:, None, :] - pts[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    ker = np.exp(-0.5 * r2 / var) / (2 * math.pi * var) ** (d / 2)
    vals = ker @ u
    grads = np.einsum("ij,ijk,j->ik", ker, -diff / var, u) if grad else None
    return vals, grads


def heat_exact(u0, kappa: float, t: float, x, tol: float = 1e-8, grad: bool = False):
    """Solution of u_t = kappa lap u at time t from u(0) = u0, at points x.

    Returns values, or (values, gradients) when ``grad`` is set.
    """
    if not t > 0:
        raise ValueError(f"heat_exact needs t > 0, got {t}")
    dim = getattr(u0, "dim", 1)
    x = _points(x, dim)
    var = 2.0 * kappa * t
    sd = math.sqrt(var)
    supp = _support(u0)
    use_support = supp is not None and sd > supp[1]
    m = 64
    prev = None
    limit = MAX_NODES if dim == 1 else int(round(2e6 ** (1 / dim)))
    while True:
        if use_support:
            cur = _support_pass(u0, x, var, supp[0], supp[1], m, grad)
        else:
            cur = _kernel_pass(u0, x, sd, m, grad)
        if prev is not None:
            err = np.max(np.abs(cur[0] - prev[0]))
            if grad:
                err = max(err, np.max(np.abs(cur[1] - prev[1])))
            if err < tol:
                break
        if 2 * m > limit:
            raise ConvergenceError(f"heat_exact did not converge to {tol} with {m} nodes per axis")
        prev = cur
        m *= 2
    return cur if grad else cur[0]


def bs_reference(sigma: float, rate: float, u0, t: float, x, tol: float = 1e-8, grad: bool = False):
    """Log-price Black-Scholes  u_t = s^2/2 u_xx + (r - s^2/2) u_x - r u  from u(0) = u0."""
    x = _points(x, getattr(u0, "dim", 1))
    half = 0.5 * sigma**2
    mu = rate - half
    disc = math.exp(-rate * t)
    shifted = x + mu * t
    out = heat_exact(u0, half, t, shifted, tol, grad)
    if grad:
        return disc * out[0], disc * out[1]
    return disc * out


@dataclass
class ExactSolution:
    """u*(t, x) with its gradient, valid on ``box`` for t in (0, t_max]."""

    evaluator: Callable
    box: Box
    method: str
    drift: float = 0.0  # constant-coefficient strong form: u_t = kappa lap u - b . grad u - r u
    kappa: float = 1.0
    reaction: float = 0.0
    t_max: float = 1.0

    def values(self, t, x):
        return self.evaluator(t, x, False)

    def node_data(self, t, rule: QuadratureRule) -> NodeData:
        v, g = self.evaluator(t, rule.nodes, True)
        return NodeData(v, g)

    def residual(self, n_probes: int = 20, seed: int = 0, dx: float = 1e-3, dt: float = 1e-5,
                 t_range=None) -> float:
        """Largest finite-difference PDE residual over random interior probes."""
        rng = np.random.default_rng(seed)
        lo, hi = t_range if t_range is not None else (0.1 * self.t_max, self.t_max)
        d = self.box.dim
        worst = 0.0
        for _ in range(n_probes):
            t = rng.uniform(lo, hi)
            x = rng.uniform(self.box.lower, self.box.upper)
            u = lambda tt, xx: float(self.values(tt, xx.reshape(1, d))[0])
            ut = (u(t + dt, x) - u(t - dt, x)) / (2 * dt)
            lap, grad = 0.0, np.zeros(d)
            for j in range(d):
                e = np.zeros(d)
                e[j] = dx
                up, um, u0 = u(t, x + e), u(t, x - e), u(t, x)
                lap += (up - 2 * u0 + um) / dx**2
                grad[j] = (up - um) / (2 * dx)
            rhs = self.kappa * lap - self.drift * grad.sum() - self.reaction * u(t, x)
            worst = max(worst, abs(ut - rhs))
        return worst


def heat_solution(u0, kappa: float, box: Box, t_max: float = 1.0, tol: float = 1e-8) -> ExactSolution:
    def ev(t, x, grad):
        return heat_exact(u0, kappa, t, x, tol, grad)

    return ExactSolution(ev, box, "convolution", 0.0, kappa, 0.0, t_max)


def bs_solution(sigma: float, rate: float, u0, box: Box, t_max: float = 1.0, tol: float = 1e-8) -> ExactSolution:
    def ev(t, x, grad):
        return bs_reference(sigma, rate, u0, t, x, tol, grad)

    half = 0.5 * sigma**2
    return ExactSolution(ev, box, "convolution", half - rate, half, rate, t_max)


def error_report(numeric, exact: ExactSolution, rule: QuadratureRule, times, u0=None) -> dict:
    """Per-time L2 and H1 errors of checkpoints against an exact solution.

    ``numeric`` are evaluables (networks) for the listed ``times``; if ``u0``
    is given, it is reported as the k = 0 row.
    """
    if len(numeric) != len(times):
        raise ValueError("need one checkpoint per time")
    dim = rule.dim
    if exact.box.dim != dim:
        raise ValueError(f"exact solution lives in {exact.box.dim} dimensions, rule in {dim}")
    rows = []
    w = rule.weights

    def add(k, t, num, ref):
        diff = num - ref
        l2 = math.sqrt(float(np.sum(w * diff.values**2)))
        h1 = math.sqrt(float(np.sum(w * (diff.values**2 + np.einsum("ij,ij->i", diff.grads, diff.grads)))))
        rows.append({"k": k, "t_k": float(t), "l2_error": l2, "h1_error": h1})

    if u0 is not None:
        add(0, 0.0, NodeData.of(u0, rule.nodes), NodeData.of(u0, rule.nodes))
    for k, (net, t) in enumerate(zip(numeric, times), start=1):
        num = NodeData.of(net, rule.nodes)
        add(k, t, num, exact.node_data(t, rule))
    return {
        "rows": rows,
        "max_l2": max(r["l2_error"] for r in rows),
        "max_h1": max(r["h1_error"] for r in rows),
    }
