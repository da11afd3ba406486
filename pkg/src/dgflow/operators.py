"""PDE operators split as  A u = L u + F(u).

L is linear and self-adjoint and only ever enters through its weak form

    a(u, v) = int grad(u)^T A(x) grad(v) + r(x) u v,

while F collects drift, jump and nonlinear terms and is treated explicitly
by the time stepper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .quadrature import NodeData, QuadratureRule, inner_product


@dataclass(frozen=True)
class JumpComponent:
    """Compound-Poisson part with intensity ``lam`` and normal jump law N(mean, cov)."""

    lam: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("jump covariance must be d x d")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if self.lam <= 0:
            raise ValueError("jump intensity must be positive")

    def sample(self, m: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((m, self.mean.size)) @ chol.T

    def density(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1, self.mean.size) - self.mean
        inv = np.linalg.inv(self.cov)
        q = np.einsum("ij,jk,ik->i", z, inv, z)
        norm = math.sqrt((2 * math.pi) ** self.mean.size * np.linalg.det(self.cov))
        return np.exp(-0.5 * q) / norm


def _const_matrix(mat):
    mat = np.asarray(mat, dtype=float)
    return lambda x: np.broadcast_to(mat, (x.shape[0],) + mat.shape).copy()


def _const_vector(vec):
    vec = np.asarray(vec, dtype=float)
    return lambda x: np.broadcast_to(vec, (x.shape[0],) + vec.shape).copy()


def _const_scalar(val):
    return lambda x: np.full(x.shape[0], float(val))


@dataclass
class OperatorSpec:
    name: str
    dim: int
    diffusion: Callable[[np.ndarray], np.ndarray]  # (N, d) -> (N, d, d)
    reaction: Callable[[np.ndarray], np.ndarray]  # (N, d) -> (N,)
    drift: Callable[[np.ndarray], np.ndarray]  # (N, d) -> (N, d)
    jump: Optional[JumpComponent] = None
    nonlinearity: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def has_drift(self) -> bool:
        return bool(self.params.get("has_drift", True))

    @property
    def is_zero_F(self) -> bool:
        return not self.has_drift and self.jump is None and self.nonlinearity is None

    def coefficients(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return self.diffusion(x), self.reaction(x), self.drift(x)

    def coefficients_at(self, rule: QuadratureRule):
        key = id(rule.nodes)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not rule.nodes:
            a, r, b = self.coefficients(rule.nodes)
            sym = np.max(np.abs(a - np.swapaxes(a, 1, 2))) if a.size else 0.0
            if sym > 1e-12:
                raise ValueError(f"diffusion tensor of {self.name} is not symmetric (defect {sym:.2e})")
            hit = (rule.nodes, a, r, b)
            self._cache.clear()
            self._cache[key] = hit
        return hit[1:]

    def bilinear_nodes(self, u: NodeData, v: NodeData, rule: QuadratureRule) -> float:
        a, r, _ = self.coefficients_at(rule)
        integrand = np.einsum("ni,nij,nj->n", u.grads, a, v.grads) + r * u.values * v.values
        if not np.all(np.isfinite(integrand)):
            raise FloatingPointError("non-finite bilinear-form integrand")
        return float(np.sum(rule.weights * integrand))

    def flux(self, u: NodeData, rule: QuadratureRule) -> np.ndarray:
        """A(x) grad u at the nodes."""
        a, _, _ = self.coefficients_at(rule)
        return np.einsum("nij,nj->ni", a, u.grads)


def bilinear_a(spec: OperatorSpec, u: NodeData, v: NodeData, rule: QuadratureRule) -> float:
    return inner_product(u, v, rule, "A", spec)


def jump_integral(u, x, samples):
    """Monte Carlo estimate of int (u(x e^z) - u(x)) nu(dz) and its standard error."""
    x = np.asarray(x, dtype=float)
    x = x.reshape(-1, samples.shape[1])
    shifted = (x[:, None, :] * np.exp(samples)[None, :, :]).reshape(-1, x.shape[1])
    diff = np.asarray(u.values(shifted)).reshape(x.shape[0], samples.shape[0])
    diff = diff - np.asarray(u.values(x)).reshape(-1, 1)
    mean = diff.mean(axis=1)
    se = diff.std(axis=1, ddof=1) / math.sqrt(samples.shape[0]) if samples.shape[0] > 1 else np.zeros_like(mean)
    return mean, se


def apply_F(spec: OperatorSpec, u, x, jump_samples: Optional[np.ndarray] = None,
            values: Optional[np.ndarray] = None, grads: Optional[np.ndarray] = None) -> np.ndarray:
    """F(u) at points ``x``.  ``values``/``grads`` may carry u and grad u at x if already known."""
    x = np.asarray(x, dtype=float).reshape(-1, spec.dim)
    out = np.zeros(x.shape[0])
    if spec.has_drift:
        g = np.asarray(u.gradients(x)) if grads is None else grads
        out += np.einsum("ni,ni->n", spec.drift(x), g.reshape(x.shape[0], spec.dim))
    if spec.jump is not None:
        if jump_samples is None or len(jump_samples) == 0:
            raise ValueError(f"operator {spec.name} has a jump part but no jump samples were given")
        mean, _ = jump_integral(u, x, np.asarray(jump_samples, dtype=float).reshape(-1, spec.dim))
        out -= spec.jump.lam * mean
    if spec.nonlinearity is not None:
        vals = np.asarray(u.values(x)) if values is None else values
        out += spec.nonlinearity(vals)
    return out


# --- catalog -------------------------------------------------------------


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v}")


def make_heat(kappa: float = 1.0, dim: int = 1) -> OperatorSpec:
    _positive(kappa=kappa)
    return OperatorSpec("heat", dim, _const_matrix(kappa * np.eye(dim)), _const_scalar(0.0),
                        _const_vector(np.zeros(dim)), params={"kappa": kappa, "has_drift": False})


def make_black_scholes(sigma: float, rate: float, dim: int = 1) -> OperatorSpec:
    """Log-price Black-Scholes: L u = -(s^2/2) lap u + r u,  F(u) = (s^2/2 - r) grad u."""
    _positive(sigma=sigma, rate=rate)
    half = 0.5 * sigma**2
    coef = half - rate
    return OperatorSpec("black_scholes", dim, _const_matrix(half * np.eye(dim)), _const_scalar(rate),
                        _const_vector(coef * np.ones(dim)),
                        params={"sigma": sigma, "rate": rate, "has_drift": coef != 0.0})


def make_heston(rate: float, eta: float, rho: float, kappa_v: float, theta: float) -> OperatorSpec:
    """Heston in (S, V) with A = V/2 [[S^2, eta rho S], [eta rho S, eta^2]]."""
    _positive(rate=rate, eta=eta, kappa_v=kappa_v, theta=theta)
    if not -1 <= rho <= 1:
        raise ValueError(f"rho must lie in [-1, 1], got {rho}")

    def diffusion(x):
        s, v = x[:, 0], x[:, 1]
        a = np.empty((x.shape[0], 2, 2))
        a[:, 0, 0] = 0.5 * v * s * s
        a[:, 0, 1] = a[:, 1, 0] = 0.5 * v * eta * rho * s
        a[:, 1, 1] = 0.5 * v * eta * eta
        return a

    def drift(x):
        s, v = x[:, 0], x[:, 1]
        return np.column_stack([(v - rate + 0.5 * rho * eta) * s,
                                kappa_v * (v - theta) + 0.5 * eta * rho * v + 0.5 * eta**2])

    return OperatorSpec("heston", 2, diffusion, _const_scalar(rate), drift,
                        params={"rate": rate, "eta": eta, "rho": rho, "kappa_v": kappa_v, "theta": theta})


def make_merton(sigma: float, rate: float, lam: float, jump_mean=0.0, jump_cov=1.0, drift=None,
                dim: int = 1) -> OperatorSpec:
    """Black-Scholes structure plus  F_jump(u) = -lam int (u(x e^z) - u(x)) nu(dz),  nu normal."""
    _positive(sigma=sigma, rate=rate, lam=lam)
    half = 0.5 * sigma**2
    b = (half - rate) * np.ones(dim) if drift is None else np.broadcast_to(np.asarray(drift, float), (dim,))
    mean = np.broadcast_to(np.asarray(jump_mean, dtype=float), (dim,))
    cov = np.asarray(jump_cov, dtype=float)
    cov = cov * np.eye(dim) if cov.ndim == 0 else cov
    jump = JumpComponent(lam, mean, cov)
    return OperatorSpec("merton", dim, _const_matrix(half * np.eye(dim)), _const_scalar(rate),
                        _const_vector(b), jump=jump,
                        params={"sigma": sigma, "rate": rate, "lam": lam, "drift": b.tolist(),
                                "has_drift": bool(np.any(b != 0))})


def make_allen_cahn(epsilon: float, dim: int = 2) -> OperatorSpec:
    """L u = -lap u (implicit), F(u) = eps^-2 (u^3 - u) (explicit)."""
    _positive(epsilon=epsilon)
    inv = epsilon**-2
    return OperatorSpec("allen_cahn", dim, _const_matrix(np.eye(dim)), _const_scalar(0.0),
                        _const_vector(np.zeros(dim)), nonlinearity=lambda u: inv * (u**3 - u),
                        params={"epsilon": epsilon, "has_drift": False})


def make_zero(dim: int = 1) -> OperatorSpec:
    """L = 0 and F = 0; every backward Euler step is the identity."""
    return OperatorSpec("zero", dim, _const_matrix(np.zeros((dim, dim))), _const_scalar(0.0),
                        _const_vector(np.zeros(dim)), params={"has_drift": False})


CATALOG = {
    "heat": make_heat,
    "black_scholes": make_black_scholes,
    "heston": make_heston,
    "merton": make_merton,
    "allen_cahn": make_allen_cahn,
    "zero": make_zero,
}


# --- assumption constants ------------------------------------------------


@dataclass
class AssumptionConstants:
    M: float
    lambda1: float
    lambda2: float
    source: str = "empirically-estimated"
    M_F: Optional[float] = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.M > 0 and self.lambda1 > 0 and self.lambda2 >= 0):
            raise ValueError(f"invalid constants M={self.M}, lambda1={self.lambda1}, lambda2={self.lambda2}")


def closed_form_constants(spec: OperatorSpec) -> Optional[AssumptionConstants]:
    """Closed-form constants where they are known (heat, Black-Scholes)."""
    if spec.name == "heat":
        kappa = spec.params["kappa"]
        # a(u,u) = kappa |grad u|^2 = kappa |u|_H1^2 - kappa |u|_L2^2
        return AssumptionConstants(kappa, kappa, kappa, "paper-derived", 0.0)
    if spec.name == "black_scholes":
        half, r = 0.5 * spec.params["sigma"] ** 2, spec.params["rate"]
        return AssumptionConstants(abs(half) + abs(r), half + r, 0.0, "paper-derived", abs(half - r))
    return None


def estimate_constants(spec: OperatorSpec, trials, rule: QuadratureRule,
                       jump_samples: Optional[np.ndarray] = None) -> AssumptionConstants:
    """Empirical (CON)/(GA) constants from a family of trial functions.

    ``trials`` are evaluables (networks) or :class:`NodeData`; at least 50 are required.
    """
    if len(trials) < 50:
        raise ValueError(f"need at least 50 trial functions, got {len(trials)}")
    data = [t if isinstance(t, NodeData) else NodeData.of(t, rule.nodes) for t in trials]
    h1 = np.array([inner_product(u, u, rule, "H1") for u in data])
    l2 = np.array([inner_product(u, u, rule, "L2") for u in data])
    keep = h1 > 0
    if not np.any(keep):
        raise ValueError("all trial functions vanish on the quadrature nodes")
    data = [u for u, k in zip(data, keep) if k]
    h1, l2 = h1[keep], l2[keep]
    a, r, _ = spec.coefficients_at(rule)
    w = rule.weights
    grads = np.stack([u.grads for u in data])  # (T, N, d)
    vals = np.stack([u.values for u in data])  # (T, N)
    flux = np.einsum("nij,tnj->tni", a, grads)
    amat = np.einsum("tni,sni,n->ts", grads, flux, w) + np.einsum("tn,sn,n->ts", vals, vals, w * r)
    norms = np.sqrt(h1)
    ratio = np.abs(amat) / np.outer(norms, norms)
    m_emp = float(ratio.max())
    diag = np.diag(amat)
    coerc = diag / h1
    if coerc.min() > 0:
        lam1, lam2 = float(coerc.min()), 0.0
    else:
        design = np.column_stack([h1, -l2])
        sol, *_ = np.linalg.lstsq(design, diag, rcond=None)
        lam1 = float(max(sol[0], 1e-12))
        lam2 = float(max(0.0, np.max((lam1 * h1 - diag) / l2)))
    m_f = None
    if not spec.is_zero_F:
        f_norms = []
        for t, u in zip([t for t, k in zip(trials, keep) if k], data):
            if isinstance(t, NodeData):
                break
            fv = apply_F(spec, t, rule.nodes, jump_samples, u.values, u.grads)
            f_norms.append(math.sqrt(float(np.sum(w * fv * fv))))
        if f_norms:
            m_f = float(np.max(np.array(f_norms) / norms[: len(f_norms)]))
    details = {"n_trials": len(data), "coercivity_min": float(coerc.min()), "coercivity_max": float(coerc.max())}
    ref = closed_form_constants(spec)
    if spec.name == "black_scholes":
        half, rr = 0.5 * spec.params["sigma"] ** 2, spec.params["rate"]
        details["closed_form_M"] = ref.M
        details["closed_form_lambda1"] = ref.lambda1
        details["elementary_lambda1"] = min(half, rr)
        details["lambda1_discrepancy"] = bool(lam1 < ref.lambda1)
    return AssumptionConstants(m_emp, lam1, lam2, "empirically-estimated", m_f, details)


def merton_jump_ratio(spec: OperatorSpec, trials, rule: QuadratureRule, jump_samples: np.ndarray) -> np.ndarray:
    """||F_nu(u)||_L2^2 / ||u||_H1^2 for each trial, with F_nu(u) = lam int (u(xe^z) - u(x)) nu(dz)."""
    if spec.jump is None:
        raise ValueError("operator has no jump component")
    out = []
    for t in trials:
        u = NodeData.of(t, rule.nodes)
        mean, _ = jump_integral(t, rule.nodes, jump_samples)
        fn = spec.jump.lam * mean
        out.append(float(np.sum(rule.weights * fn * fn)) / inner_product(u, u, rule, "H1"))
    return np.array(out)


def merton_jump_bound(lam: float) -> float:
    return 2.0 * lam * (math.e + 1.0)
