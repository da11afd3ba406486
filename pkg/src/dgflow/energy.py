"""Per-step energy functional of the backward Euler scheme.

For the step U^{k-1} -> U^k,

    I(u) = 1/2 ||u - U^{k-1}||^2 + h/2 a(u, u) + h <F(U^{k-1}), u>,

all three terms realised on a single quadrature rule so that the loss and
its analytic parameter gradient are exactly consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import ShallowNetwork
from .operators import OperatorSpec, apply_F
from .quadrature import NodeData, QuadratureRule


class StepSizeError(ValueError):
    """The time step violates h < 1/(2 lambda_2)."""


@dataclass
class EnergyContext:
    prev: object  # evaluable U^{k-1}: .values(x), .gradients(x)
    h: float
    spec: OperatorSpec
    rule: QuadratureRule
    jump_samples: Optional[np.ndarray] = None
    lambda2: Optional[float] = None
    prev_data: NodeData = field(init=False)
    f_prev: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.h < 0:
            raise ValueError("time step must be nonnegative")
        if self.lambda2 is not None and self.lambda2 > 0 and not self.h < 1.0 / (2.0 * self.lambda2):
            raise StepSizeError(f"h = {self.h} violates h < 1/(2 lambda_2) = {1.0 / (2.0 * self.lambda2):.6g}")
        x = self.rule.nodes
        self.prev_data = NodeData.of(self.prev, x)
        if self.spec.is_zero_F:
            self.f_prev = np.zeros(x.shape[0])
        else:
            self.f_prev = apply_F(self.spec, self.prev, x, self.jump_samples,
                                  self.prev_data.values, self.prev_data.grads)
        if not (np.all(np.isfinite(self.prev_data.values)) and np.all(np.isfinite(self.f_prev))):
            raise FloatingPointError("non-finite values in the previous step")

    def check_cache(self, n_probe: int = 10, seed: int = 0) -> float:
        """Largest discrepancy between cached and fresh values at random nodes."""
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.rule.size, size=min(n_probe, self.rule.size), replace=False)
        x = self.rule.nodes[idx]
        fresh = NodeData.of(self.prev, x)
        err = max(np.max(np.abs(fresh.values - self.prev_data.values[idx])),
                  np.max(np.abs(fresh.grads - self.prev_data.grads[idx])))
        if not self.spec.is_zero_F:
            f = apply_F(self.spec, self.prev, x, self.jump_samples, fresh.values, fresh.grads)
            err = max(err, np.max(np.abs(f - self.f_prev[idx])))
        return float(err)


def node_data(net, rule: QuadratureRule) -> NodeData:
    if isinstance(net, NodeData):
        return net
    if isinstance(net, ShallowNetwork):
        pr = net.pairs(rule.nodes)
        return NodeData(net.values(rule.nodes, pr), net.gradients(rule.nodes, pr))
    return NodeData.of(net, rule.nodes)


def loss_nodes(ctx: EnergyContext, u: NodeData) -> float:
    w = ctx.rule.weights
    diff = u.values - ctx.prev_data.values
    a, r, _ = ctx.spec.coefficients_at(ctx.rule)
    quad = np.einsum("ni,nij,nj->n", u.grads, a, u.grads) + r * u.values**2
    integrand = 0.5 * diff**2 + 0.5 * ctx.h * quad + ctx.h * ctx.f_prev * u.values
    if not np.all(np.isfinite(integrand)):
        raise FloatingPointError("non-finite energy integrand")
    return float(np.sum(w * integrand))


def loss(ctx: EnergyContext, net) -> float:
    """I^k evaluated at a network (or any evaluable / NodeData)."""
    return loss_nodes(ctx, node_data(net, ctx.rule))


def frechet_pair(ctx: EnergyContext, v, u) -> float:
    """<DI(v), u> = <v - U^{k-1}, u> + h a(v, u) + h <F(U^{k-1}), u>."""
    v, u = node_data(v, ctx.rule), node_data(u, ctx.rule)
    w = ctx.rule.weights
    a = ctx.spec.bilinear_nodes(v, u, ctx.rule)
    return float(np.sum(w * (v.values - ctx.prev_data.values + ctx.h * ctx.f_prev) * u.values)) + ctx.h * a


def first_variation(ctx: EnergyContext, v: NodeData):
    """Node weights (s, q) with <DI(v), u> = sum s u + q . grad u."""
    w = ctx.rule.weights
    _, r, _ = ctx.spec.coefficients_at(ctx.rule)
    s = w * (v.values - ctx.prev_data.values + ctx.h * (ctx.f_prev + r * v.values))
    q = (ctx.h * w)[:, None] * ctx.spec.flux(v, ctx.rule)
    return s, q


def loss_and_grad(ctx: EnergyContext, net: ShallowNetwork):
    """(I^k(V), grad_theta I^k(V)) sharing one pass over the support pairs."""
    x = ctx.rule.nodes
    pr = net.pairs(x, hessian=True)
    v = NodeData(net.values(x, pr), net.gradients(x, pr))
    s, q = first_variation(ctx, v)
    return loss_nodes(ctx, v), net.pair_gradient(pr, x, s, q)


def loss_grad(ctx: EnergyContext, net: ShallowNetwork) -> np.ndarray:
    return loss_and_grad(ctx, net)[1]
