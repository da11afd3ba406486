import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dgflow.energy import EnergyContext
from dgflow.functions import BumpFunction, ZeroFunction
from dgflow.network import ShallowNetwork, sample_neurons
from dgflow.operators import OperatorSpec, make_heat
from dgflow.quadrature import Box, tensor_grid
from dgflow.widelimit import (GridQuadratic, build_Ttilde, compare_wide_limit, direct_flow, empirical_kernel,
                              gradient_descent_minimizer, grid_minimizer, limit_setup, self_adjoint_defect,
                              spectral_flow)


@pytest.fixture(scope="module")
def rule32():
    return tensor_grid(Box.cube(4.0, 1), 32)


@pytest.fixture(scope="module")
def ctx32(rule32):
    return EnergyContext(BumpFunction(1), 0.025, make_heat(), rule32)


@pytest.fixture(scope="module")
def kernel32(rule32):
    return empirical_kernel(rule32, 100000, 3)


@pytest.fixture(scope="module")
def flow32(kernel32, ctx32):
    T, G = build_Ttilde(kernel32, ctx32)
    w = grid_minimizer(ctx32).values
    return T, G, w, spectral_flow(T, G, np.zeros_like(w), w)


# --- kernel -----------------------------------------------------------------


def test_kernel_structure(kernel32):
    Z = kernel32.Z
    assert kernel32.symmetry_defect() < 1e-12
    ev = np.linalg.eigvalsh(Z)
    assert ev[0] >= -1e-10 * ev[-1]
    assert np.all(np.diag(Z) >= 0)
    assert np.all(kernel32.Z_se >= 0)


def test_kernel_vanishes_where_no_neuron_reaches():
    k = empirical_kernel(np.array([[0.0], [0.5], [1.0e4]]), 20000, 0)
    assert np.all(k.Z[2] == 0) and np.all(k.Z[:, 2] == 0)
    assert k.Z[0, 0] > 0


def test_kernel_matches_per_neuron_gradients():
    # independent route: unclipped per-neuron parameter gradients of a network
    grid = np.linspace(-2, 2, 9)[:, None]
    rng = np.random.default_rng(8)
    draws = sample_neurons(rng, 3000, 1)
    net = ShallowNetwork(*draws, delta=0.75, clip_radius=1e12)
    feats = np.concatenate([net.param_grad(grid, i).stacked() for i in range(net.n)], axis=1)
    ref = feats @ feats.T / net.n
    pos = [0]

    def replay(_, k):
        lo, pos[0] = pos[0], pos[0] + k
        return tuple(a[lo:lo + k] for a in draws)

    est = empirical_kernel(grid, 3000, 0, sampler=replay, chunk=500)
    assert pos[0] == 3000
    assert np.allclose(est.Z, ref, rtol=1e-12, atol=1e-14)


def test_kernel_monte_carlo_self_consistency():
    pts = np.array([[0.0], [0.7]])
    small = empirical_kernel(pts, 10**5, 11)
    large = empirical_kernel(pts, 10**6, 12)
    pooled = np.sqrt(small.Z_se**2 + large.Z_se**2)
    assert np.all(np.abs(small.Z - large.Z) < 3 * pooled)


def test_kernel_requires_samples():
    with pytest.raises(ValueError):
        empirical_kernel(np.zeros((2, 1)), 10, 0)


def test_kernel_deterministic_per_seed(rule32):
    a, b = empirical_kernel(rule32, 5000, 4), empirical_kernel(rule32, 5000, 4)
    assert np.array_equal(a.Z, b.Z)


# --- grid minimizer ------------------------------------------------------------


def test_zero_data_gives_zero_minimizer(rule32):
    ctx = EnergyContext(ZeroFunction(), 0.025, make_heat(), rule32)
    assert np.all(grid_minimizer(ctx).values == 0)


def test_vanishing_step_returns_previous_values(rule32):
    ctx = EnergyContext(BumpFunction(1), 1e-6, make_heat(), rule32)
    w = grid_minimizer(ctx).values
    assert np.max(np.abs(w - BumpFunction(1).values(rule32.nodes))) < 1e-4


def test_linear_solve_against_gradient_descent():
    rule = tensor_grid(Box.cube(2.0, 1), 64)
    ctx = EnergyContext(BumpFunction(1), 0.025, make_heat(), rule)
    quad = GridQuadratic.build(ctx)
    w = grid_minimizer(ctx, quad).values
    gd = gradient_descent_minimizer(quad, 100000)
    assert math.sqrt(float(np.sum(rule.weights * (w - gd) ** 2))) < 1e-6
    assert np.max(np.abs(quad.gradient(w))) < 1e-8
    # the quadratic's gradient is the Frechet pairing with grid basis functions
    e = np.zeros(64)
    e[10] = 1.0
    assert quad.pair(w, e) == pytest.approx(quad.gradient(w)[10])


def test_indefinite_system_is_rejected(rule32):
    d = 1
    spec = OperatorSpec("bad", d, lambda x: np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy(),
                        lambda x: np.full(x.shape[0], -100.0), lambda x: np.zeros_like(x),
                        params={"has_drift": False})
    ctx = EnergyContext(BumpFunction(1), 0.025, spec, rule32)
    with pytest.raises(ValueError):
        grid_minimizer(ctx)


# --- T and the Htilde metric --------------------------------------------------------


def test_T_self_adjoint_and_positive(flow32, rule32):
    T, G, _, _ = flow32
    assert self_adjoint_defect(T, G) < 1e-8
    assert np.all(T @ np.zeros(32) == 0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.standard_normal(32)
        assert v @ G @ T @ v >= -1e-10


def test_grid_mismatch(kernel32):
    other = tensor_grid(Box.cube(3.0, 1), 32)
    ctx = EnergyContext(BumpFunction(1), 0.025, make_heat(), other)
    with pytest.raises(ValueError):
        build_Ttilde(kernel32, ctx)


def test_trace_equals_mean_feature_norm(flow32, rule32):
    T, G, _, _ = flow32
    from dgflow.widelimit import feature_matrix
    rng = np.random.default_rng(99)
    beta, alpha, c = sample_neurons(rng, 50000, 1)
    phi = feature_matrix(rule32.nodes, beta, alpha, c).reshape(32, 50000, 3)
    norms = np.einsum("akc,ab,bkc->k", phi, G, phi)
    se = norms.std(ddof=1) / math.sqrt(norms.size)
    assert abs(np.trace(T) - norms.mean()) < 4 * se


def test_norm_sandwich(ctx32):
    quad = GridQuadratic.build(ctx32)
    G = quad.H.toarray()
    H1 = quad.calc.h1_gram().toarray()
    h, lam1, M = ctx32.h, 1.0, 1.0
    rng = np.random.default_rng(1)
    for _ in range(50):
        u = rng.standard_normal(32)
        ht, h1 = u @ G @ u, u @ H1 @ u
        assert h * lam1 * h1 <= ht + 1e-12 and ht <= (1 + h * M) * h1 + 1e-12


# --- spectral and direct flows ----------------------------------------------------


def test_spectral_basis(flow32):
    _, G, w, fl = flow32
    E = fl.eigvecs
    assert np.max(np.abs(E.T @ G @ E - np.eye(32))) < 1e-10
    assert np.all(np.diff(fl.eigvals) <= 0) and fl.eigvals[-1] > 0
    assert np.max(np.abs(fl.evaluate(0.0) - (0 - w))) < 1e-10


def test_norm_identity_and_monotone_decay(flow32):
    _, G, w, fl = flow32
    for t in (0.0, 1.0, 7.5):
        v = fl.evaluate(t)
        assert v @ G @ v == pytest.approx(np.sum(np.exp(-2 * fl.eigvals * t) * fl.h0**2), rel=1e-10)
    norms = [fl.norm_sq(t) for t in np.linspace(0, 5 / fl.eigvals[-1], 50)]
    assert all(b <= a for a, b in zip(norms, norms[1:]))
    assert math.sqrt(norms[-1] / norms[0]) < 0.01


def test_direct_flow_agrees_with_spectral(flow32):
    T, G, w, fl = flow32
    times = np.linspace(0, 30, 10)
    traj = direct_flow(T, G, np.zeros_like(w), w, times)
    prev = math.inf
    for t, v in zip(times, traj):
        diff = v - fl.trajectory(t)
        ref = math.sqrt(fl.norm_sq(t))
        assert math.sqrt(diff @ G @ diff) < 1e-6 * ref
        cur = math.sqrt((v - w) @ G @ (v - w))
        assert cur <= prev * (1 + 1e-12)
        prev = cur


def test_random_symmetric_case():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((32, 32))
    Z = A @ A.T / 32
    B = rng.standard_normal((32, 32))
    G = B @ B.T / 32 + np.eye(32)
    T = Z @ G
    w, v0 = rng.standard_normal(32), rng.standard_normal(32)
    fl = spectral_flow(T, G, v0, w)
    times = [0.0, 0.3, 1.0, 2.5]
    traj = direct_flow(T, G, v0, w, times)
    for t, v in zip(times, traj):
        d = v - fl.trajectory(t)
        assert math.sqrt(d @ G @ d) < 1e-6 * math.sqrt(fl.norm_sq(t))


def test_equilibrium_and_scalar_case():
    T, G = np.array([[2.0]]), np.array([[1.5]])
    w = np.array([0.3])
    traj = direct_flow(T, G, w, w, [0.0, 1.0, 4.0])
    assert np.all(traj == w)
    fl = spectral_flow(T, G, np.array([1.3]), w)
    assert fl.eigvals[0] == pytest.approx(2.0)
    for t in (0.5, 2.0):
        exact = w + math.exp(-2.0 * t) * 1.0
        assert fl.trajectory(t)[0] == pytest.approx(exact[0], abs=1e-10)
        assert direct_flow(T, G, np.array([1.3]), w, [t], courant=0.005)[0, 0] == pytest.approx(exact[0], abs=1e-10)


def test_direct_flow_input_checks():
    with pytest.raises(ValueError):
        direct_flow(np.eye(2), np.eye(2), np.zeros(2), np.zeros(2), [1.0, 0.5])


@given(st.floats(0.1, 5.0), st.floats(-2, 2), st.floats(0.0, 3.0))
def test_scalar_decay_property(gamma, h0, t):
    T, G = np.array([[gamma]]), np.array([[1.0]])
    fl = spectral_flow(T, G, np.array([h0]), np.array([0.0]))
    assert fl.norm_sq(t) == pytest.approx(math.exp(-2 * gamma * t) * h0 * h0, rel=1e-12, abs=1e-300)


# --- finite width versus the limit ------------------------------------------------


@pytest.fixture(scope="module")
def small_setup():
    rule = tensor_grid(Box.cube(8.0, 1), 320)
    ctx = EnergyContext(BumpFunction(1), 0.025, make_heat(), rule)
    return limit_setup(ctx, 20000, 2)


def test_initial_error_scales_like_inverse_quarter_power(small_setup):
    ns = [64, 256, 1024, 4096]
    _, summary = compare_wide_limit(small_setup, ns, [0.0], 40, 17)
    errs = [s["sup_mean_error"] for s in summary]
    slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert -0.35 <= slope <= -0.15


def test_doubling_trials_is_consistent(small_setup):
    rows5, _ = compare_wide_limit(small_setup, [128], [0.0], 10, 100)
    rows10, _ = compare_wide_limit(small_setup, [128], [0.0], 20, 300)
    pooled = math.hypot(rows5[0]["std_error"], rows10[0]["std_error"])
    assert abs(rows5[0]["mean_error"] - rows10[0]["mean_error"]) < 2 * pooled


def test_compare_preconditions(small_setup):
    with pytest.raises(ValueError):
        compare_wide_limit(small_setup, [64, 32], [0.0], 5, 0)
    with pytest.raises(ValueError):
        compare_wide_limit(small_setup, [64], [0.0], 4, 0)


def test_short_training_tracks_limit(small_setup):
    rows, summary = compare_wide_limit(small_setup, [64, 1024], [0.0, 1.0], 5, 21, flow_dt=0.05)
    assert len(rows) == 4 and summary[1]["sup_mean_error"] < summary[0]["sup_mean_error"]
