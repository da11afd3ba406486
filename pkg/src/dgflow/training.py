"""Gradient-flow training of the parameters and the backward Euler outer loop.

The flow  d theta/dt = -eta_n grad_theta I^k  is integrated by explicit Euler.
A step that would increase the loss is retried with a smaller flow-time step,
so every accepted step is a descent step as for the continuous flow.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .energy import EnergyContext, loss, loss_and_grad
from .network import ShallowNetwork, init_params, learning_rate

log = logging.getLogger(__name__)


class TrainingStall(RuntimeError):
    """No descent step found after the allowed number of step-size reductions."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class FlowConfig:
    dt: float = 0.05
    t_end: float = 50.0
    backoff: float = 0.5
    max_backoffs: int = 30
    grad_tol: float = 0.0
    growth: float = 1.0
    max_dt: Optional[float] = None
    record_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("flow step dt must be positive")
        if not self.t_end > 0:
            raise ValueError("training horizon t_end must be positive")
        if not 0 < self.backoff < 1:
            raise ValueError("backoff factor must lie in (0, 1)")
        if self.growth < 1:
            raise ValueError("growth factor must be >= 1")


@dataclass
class TimeStepConfig:
    T: float = 0.1
    K: int = 8
    warm_start: bool = False
    flow: FlowConfig = field(default_factory=FlowConfig)

    @property
    def h(self) -> float:
        return self.T / self.K


@dataclass
class TrainingTrace:
    times: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    snapshot_ids: list = field(default_factory=list)
    steps: int = 0
    rejected: int = 0
    monotonicity_violations: int = 0
    max_increase: float = 0.0
    stop_reason: str = ""

    def record(self, t, value, gnorm, step):
        if self.times and t <= self.times[-1]:
            raise AssertionError("trace times must be strictly increasing")
        self.times.append(float(t))
        self.losses.append(float(value))
        self.grad_norms.append(float(gnorm))
        self.snapshot_ids.append(int(step))

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    @property
    def final_grad_norm(self) -> float:
        return self.grad_norms[-1]


def flow_step(ctx: EnergyContext, net: ShallowNetwork, dt: float, eta: Optional[float] = None,
              grad: Optional[np.ndarray] = None) -> ShallowNetwork:
    """One explicit Euler step  theta <- theta - dt eta grad_theta I."""
    if eta is None:
        eta = net.learning_rate
    if grad is None:
        grad = loss_and_grad(ctx, net)[1]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite loss gradient")
    theta = net.flat() - dt * eta * grad
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("non-finite parameter update")
    return net.with_flat(theta)


def train(ctx: EnergyContext, net: ShallowNetwork, cfg: FlowConfig,
          eta: Optional[float] = None, callback: Optional[Callable] = None):
    """Integrate the gradient flow up to ``cfg.t_end`` (or until the gradient norm drops below ``grad_tol``).

    ``callback(t, net)`` is invoked after every accepted step.
    """
    eta = net.learning_rate if eta is None else eta
    trace = TrainingTrace()
    value, grad = loss_and_grad(ctx, net)
    gnorm = float(np.linalg.norm(grad))
    trace.record(0.0, value, gnorm, 0)
    t, dt, step = 0.0, cfg.dt, 0
    max_dt = cfg.max_dt if cfg.max_dt is not None else math.inf
    while True:
        if gnorm < cfg.grad_tol:
            trace.stop_reason = "grad_tol"
            break
        if t >= cfg.t_end * (1 - 1e-12):
            trace.stop_reason = "t_end"
            break
        tries = 0
        while True:
            step_dt = min(dt, cfg.t_end - t)
            cand = flow_step(ctx, net, step_dt, eta, grad)
            new_value, new_grad = loss_and_grad(ctx, cand)
            if new_value <= value:
                break
            trace.rejected += 1
            tries += 1
            dt *= cfg.backoff
            if tries > cfg.max_backoffs:
                trace.stop_reason = "stall"
                raise TrainingStall(
                    f"no descent step after {tries} reductions at t={t:.6g} (dt={dt:.3e}, loss={value:.12g}, "
                    f"|grad|={gnorm:.3e})", trace)
        t += step_dt
        step += 1
        increase = new_value - value
        if increase > 1e-12:
            trace.monotonicity_violations += 1
        trace.max_increase = max(trace.max_increase, increase)
        net, value, grad = cand, new_value, new_grad
        gnorm = float(np.linalg.norm(grad))
        if step % cfg.record_every == 0:
            trace.record(t, value, gnorm, step)
        if callback is not None:
            callback(t, net)
        if tries == 0:
            dt = min(dt * cfg.growth, max_dt)
    if trace.times[-1] != t:
        trace.record(t, value, gnorm, step)
    trace.steps = step
    return net, trace


@dataclass
class StepRecord:
    k: int
    t_k: float
    final_loss: float
    grad_norm: float
    flow_time: float
    flow_steps: int
    rejected: int
    stop_reason: str
    wall_time: float
    warm_start: bool
    checkpoint_path: Optional[str] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def solve_pde(spec, u0, tcfg: TimeStepConfig, rule, n: int, delta: float = 0.75,
              clip_radius: Optional[float] = None, seed: int = 0, jump_samples=None,
              lambda2: Optional[float] = None, init_net: Optional[ShallowNetwork] = None,
              checkpoint: Optional[Callable[[int, ShallowNetwork], str]] = None):
    """Backward Euler in time with one trained network per step.

    Returns the list of networks (U^1..U^K), the per-step records and the
    training traces.  Step k trains from a fresh initialisation drawn with seed
    ``seed + k`` unless ``tcfg.warm_start`` is set, in which case it starts from
    U^{k-1} (from ``init_net`` for k = 1 if given).
    """
    h = tcfg.h
    prev = u0
    nets, records, traces = [], [], []
    for k in range(1, tcfg.K + 1):
        tic = time.perf_counter()
        ctx = EnergyContext(prev, h, spec, rule, jump_samples, lambda2)
        if tcfg.warm_start and isinstance(prev, ShallowNetwork):
            start = prev.copy()
        elif tcfg.warm_start and k == 1 and init_net is not None:
            start = init_net.copy()
        else:
            start = init_params(n, delta, clip_radius, seed + k, spec.dim)
        net, trace = train(ctx, start, tcfg.flow)
        net.meta.update({"k": k, "t_k": k * h})
        path = checkpoint(k, net) if checkpoint is not None else None
        rec = StepRecord(k, k * h, trace.final_loss, trace.final_grad_norm, trace.times[-1], trace.steps,
                         trace.rejected, trace.stop_reason, time.perf_counter() - tic, tcfg.warm_start, path)
        log.info("step %d/%d: loss=%.10g |grad|=%.3e flow steps=%d (%s)", k, tcfg.K, rec.final_loss,
                 rec.grad_norm, rec.flow_steps, rec.stop_reason)
        nets.append(net)
        records.append(rec)
        traces.append(trace)
        prev = net
    return nets, records, traces


def eta_for(n: int, delta: float) -> float:
    return learning_rate(n, delta)
