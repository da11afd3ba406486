import math

import numpy as np
import pytest

from dgflow.energy import EnergyContext, loss, loss_and_grad
from dgflow.functions import BumpFunction
from dgflow.network import init_params
from dgflow.operators import make_black_scholes, make_heat, make_zero
from dgflow.quadrature import Box, NodeData, default_box, tensor_grid
from dgflow.training import (FlowConfig, TimeStepConfig, TrainingStall, flow_step, solve_pde, train)
from dgflow.widelimit import GridQuadratic, grid_minimizer

CLIP = 3.0  # admissible for n >= 21; keeps the covering box small


@pytest.fixture(scope="module")
def rule():
    box = default_box(CLIP, 1)
    return tensor_grid(box, int(round(2 * box.upper[0] / 0.02)))


FAST = FlowConfig(dt=0.5, t_end=20000, growth=1.1, grad_tol=1e-6)


def test_flow_config_validation():
    for kw in ({"dt": 0}, {"t_end": -1}, {"backoff": 1.0}, {"growth": 0.5}):
        with pytest.raises(ValueError):
            FlowConfig(**kw)
    assert TimeStepConfig(0.1, 4).h == pytest.approx(0.025)


def test_flow_step_moves_against_gradient(rule):
    ctx = EnergyContext(BumpFunction(1), 0.025, make_heat(), rule)
    net = init_params(64, clip_radius=CLIP, seed=0)
    value, grad = loss_and_grad(ctx, net)
    new = flow_step(ctx, net, 1e-3)
    assert np.allclose(new.flat(), net.flat() - 1e-3 * net.learning_rate * grad)
    assert loss(ctx, new) < value


def test_trace_is_monotone_and_times_increase(rule):
    ctx = EnergyContext(BumpFunction(1), 0.025, make_black_scholes(0.4, 0.05), rule)
    net, trace = train(ctx, init_params(128, clip_radius=CLIP, seed=1), FlowConfig(dt=2.0, t_end=200, growth=1.2))
    assert trace.monotonicity_violations == 0 and trace.max_increase <= 1e-12
    assert all(b <= a for a, b in zip(trace.losses, trace.losses[1:]))
    assert all(b > a for a, b in zip(trace.times, trace.times[1:]))
    assert trace.rejected > 0  # the aggressive step needed backoffs
    assert trace.stop_reason == "t_end" and trace.times[-1] == pytest.approx(200)


def test_stall_is_reported(rule):
    ctx = EnergyContext(BumpFunction(1), 0.025, make_heat(), rule)
    with pytest.raises(TrainingStall) as info:
        train(ctx, init_params(64, clip_radius=CLIP, seed=0), FlowConfig(dt=1e6, t_end=1e7, max_backoffs=2))
    assert info.value.trace is not None and "no descent step" in str(info.value)


def test_final_loss_matches_grid_minimum(rule):
    ctx = EnergyContext(BumpFunction(1), 0.0125, make_heat(), rule)
    net, trace = train(ctx, init_params(256, clip_radius=CLIP, seed=3), FAST)
    quad = GridQuadratic.build(ctx)
    assert trace.stop_reason == "grad_tol"
    assert abs(trace.final_loss - quad.loss(grid_minimizer(ctx, quad).values)) < 1e-3


def test_restart_at_minimizer_is_stationary(rule):
    ctx = EnergyContext(BumpFunction(1), 0.025, make_heat(), rule)
    net, first = train(ctx, init_params(256, clip_radius=CLIP, seed=4), FAST)
    assert first.stop_reason == "grad_tol"
    again, trace = train(ctx, net, FlowConfig(dt=1e-3, t_end=5e-3))
    assert trace.final_grad_norm < 1e-6
    assert max(abs(b - a) for a, b in zip(trace.losses, trace.losses[1:])) < 1e-10


def test_warm_and_cold_starts_reach_the_same_minimum(rule):
    tcfg_cold = TimeStepConfig(0.05, 2, False, FAST)
    tcfg_warm = TimeStepConfig(0.05, 2, True, FAST)
    _, cold, _ = solve_pde(make_heat(), BumpFunction(1), tcfg_cold, rule, 256, clip_radius=CLIP, seed=0)
    _, warm, _ = solve_pde(make_heat(), BumpFunction(1), tcfg_warm, rule, 256, clip_radius=CLIP, seed=0)
    for c, w in zip(cold, warm):
        assert abs(c.final_loss - w.final_loss) < 5e-3
    assert warm[1].warm_start and not cold[1].warm_start


def test_zero_operator_is_a_fixed_point(rule):
    tcfg = TimeStepConfig(0.03, 3, True, FlowConfig(dt=0.5, t_end=5000, growth=1.1, grad_tol=1e-8))
    nets, recs, _ = solve_pde(make_zero(), BumpFunction(1), tcfg, rule, 64, clip_radius=CLIP, seed=1)
    for prev, cur in zip(nets, nets[1:]):
        assert np.array_equal(prev.flat(), cur.flat())  # already stationary: no step taken
    assert recs[1].flow_steps == 0 and recs[2].flow_steps == 0


def test_short_time_step_stays_close_to_datum(rule):
    # the network step tracks the discrete backward Euler update, whose distance to u0 is O(h)
    u0 = BumpFunction(1)
    errors, grid_errors = [], []
    for h in (1e-2, 1e-3):
        tcfg = TimeStepConfig(h, 1, False, FAST)
        nets, _, _ = solve_pde(make_heat(), u0, tcfg, rule, 256, clip_radius=CLIP, seed=0)
        d = NodeData.of(nets[0], rule.nodes) - NodeData.of(u0, rule.nodes)
        errors.append(math.sqrt(float(np.sum(rule.weights * d.values**2))))
        w = grid_minimizer(EnergyContext(u0, h, make_heat(), rule)).values
        grid_errors.append(math.sqrt(float(np.sum(rule.weights * (w - u0.values(rule.nodes)) ** 2))))
    for e, g in zip(errors, grid_errors):
        assert e == pytest.approx(g, rel=0.02)
    assert 5.0 < errors[0] / errors[1] < 10.5


def test_checkpoint_callback_and_records(rule, tmp_path):
    paths = []

    def save(k, net):
        paths.append(net.save(tmp_path / f"U_{k}"))
        return str(paths[-1])

    tcfg = TimeStepConfig(0.02, 2, False, FlowConfig(dt=0.5, t_end=20))
    nets, recs, traces = solve_pde(make_heat(), BumpFunction(1), tcfg, rule, 32, clip_radius=CLIP, seed=9,
                                   checkpoint=save)
    assert [r.k for r in recs] == [1, 2] and recs[1].t_k == pytest.approx(0.02)
    assert recs[0].checkpoint_path == str(paths[0]) and nets[1].meta["k"] == 2
    assert nets[0].seed == 10 and nets[1].seed == 11  # fresh init per step uses seed + k
    assert set(recs[0].as_dict()) >= {"k", "final_loss", "grad_norm", "wall_time", "checkpoint_path"}
