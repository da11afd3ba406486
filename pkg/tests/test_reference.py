import math

import numpy as np
import pytest

from dgflow.functions import BumpFunction, GaussianDensity, SumFunction
from dgflow.quadrature import Box, tensor_grid
from dgflow.reference import (ConvergenceError, bs_reference, bs_solution, error_report, heat_exact,
                              heat_solution)

X = np.linspace(-3, 3, 25)


def test_gaussian_datum_gives_gaussian():
    s2, kappa, t = 0.3, 0.7, 0.4
    got = heat_exact(GaussianDensity(s2), kappa, t, X)
    assert np.allclose(got, GaussianDensity(s2 + 2 * kappa * t).values(X), atol=1e-8)
    val, grad = heat_exact(GaussianDensity(s2), kappa, t, X, grad=True)
    assert np.allclose(grad, GaussianDensity(s2 + 2 * kappa * t).gradients(X), atol=1e-8)


def test_small_time_recovers_datum():
    u0 = BumpFunction(1, 0.2, 1.0)
    x = np.array([-0.5, 0.0, 0.3, 0.9])
    assert np.allclose(heat_exact(u0, 1.0, 1e-6, x), u0.values(x), atol=1e-3)


def test_mass_conservation():
    u0 = SumFunction(BumpFunction(1, -1.0, 0.7), BumpFunction(1, 1.0, 0.5, 2.0))
    rule = tensor_grid(Box.cube(12.0, 1), 4000)
    for t in (0.05, 0.5, 2.0):
        mass = float(np.sum(rule.weights * heat_exact(u0, 1.0, t, rule.nodes)))
        assert mass == pytest.approx(0.7 + 2.0 * 0.5, abs=1e-6)


def test_two_dimensional_heat_against_product_gaussian():
    g = GaussianDensity(0.5, 2)
    pts = np.random.default_rng(0).uniform(-2, 2, (10, 2))
    got = heat_exact(g, 0.5, 0.3, pts, tol=1e-7)
    assert np.allclose(got, GaussianDensity(0.8, 2).values(pts), atol=1e-7)


def test_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        heat_exact(BumpFunction(1), 1.0, 0.0, X)


def test_black_scholes_collapses_to_heat():
    u0 = BumpFunction(1)
    sigma = math.sqrt(2 * 0.8)
    assert np.allclose(bs_reference(sigma, 0.8, u0, 0.2, X) * math.exp(0.8 * 0.2),
                       heat_exact(u0, 0.8, 0.2, X + (0.8 - 0.8) * 0.2), atol=0)
    # r = sigma^2/2 removes the shift; discount is the only difference
    assert np.allclose(bs_reference(sigma, 0.8, u0, 0.2, X), math.exp(-0.16) * heat_exact(u0, 0.8, 0.2, X))


def test_black_scholes_small_volatility_is_transport():
    u0 = BumpFunction(1, 0.0, 1.0)
    r, t = 0.05, 0.5
    x = np.array([-0.4, 0.0, 0.2])
    ref = math.exp(-r * t) * u0.values(x + r * t)
    assert np.allclose(bs_reference(1e-3, r, u0, t, x), ref, atol=1e-2)


@pytest.mark.parametrize("which", ["heat", "bs"])
def test_pde_residual(which):
    u0 = BumpFunction(1)
    box = Box.cube(3.0, 1)
    sol = heat_solution(u0, 1.0, box, 0.1) if which == "heat" else bs_solution(0.4, 0.05, u0, box, 0.5)
    assert sol.residual(n_probes=20, seed=1) < 1e-4


def test_error_report_contract():
    u0 = BumpFunction(1)
    box = Box.cube(4.0, 1)
    rule = tensor_grid(box, 400)
    sol = heat_solution(u0, 1.0, box, 0.1)

    class Exact:
        def __init__(self, t):
            self.t = t

        def values(self, x):
            return heat_exact(u0, 1.0, self.t, x)

        def gradients(self, x):
            return heat_exact(u0, 1.0, self.t, x, grad=True)[1]

    times = [0.05, 0.1]
    rep = error_report([Exact(t) for t in times], sol, rule, times, u0=u0)
    assert rep["max_l2"] < 1e-8 and rep["max_h1"] < 1e-8
    assert [r["k"] for r in rep["rows"]] == [0, 1, 2]
    perturbed = error_report([u0, u0], sol, rule, times)
    assert all(r["l2_error"] >= 0 for r in perturbed["rows"])
    assert perturbed["max_l2"] == max(r["l2_error"] for r in perturbed["rows"])
    assert perturbed["max_h1"] >= perturbed["max_l2"]
    with pytest.raises(ValueError):
        error_report([u0], sol, rule, times)
    with pytest.raises(ValueError):
        error_report([u0, u0], sol, tensor_grid(Box.cube(4.0, 2), 10), times)


def test_convergence_failure_is_reported():
    class Rough:
        dim = 1

        def values(self, x):
            return np.sign(np.sin(50 * np.asarray(x).reshape(-1)))

    with pytest.raises(ConvergenceError):
        heat_exact(Rough(), 1.0, 1e-4, np.array([0.01]), tol=1e-14)
