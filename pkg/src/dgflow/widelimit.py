"""Wide-network limit of the training dynamics on a tensor grid.

As n -> infinity the trained network follows

    dV/dt = -<DI(V), Z(x, .)>,    Z(x, y) = E[X(x) . X(y)],

with X the unclipped per-neuron parameter gradient under the initialisation
law.  On a grid, with gradients reconstructed piecewise-linearly, the
right-hand side becomes  -T (V - w_*)  with  T = Z G  and  G  the Gram matrix
of the modified inner product <u, v>_L2 + h a(u, v).  T is self-adjoint in the
G metric, so the flow is solved exactly by a generalised symmetric
eigendecomposition and, independently, by RK4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from .activation import bump
from .energy import EnergyContext
from .network import init_params, sample_neurons, support_pairs
from .quadrature import GridCalculus, QuadratureRule
from .training import FlowConfig, train


BATCHES = 20


@dataclass
class KernelEstimate:
    grid: np.ndarray  # (g, d)
    Z: np.ndarray  # (g, g)
    Z_se: np.ndarray  # Monte Carlo standard error of each entry
    m: int
    seed: int

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.Z - self.Z.T)))

    def min_eig_ratio(self) -> float:
        ev = np.linalg.eigvalsh(self.Z)
        return float(ev[0] / ev[-1]) if ev[-1] > 0 else 0.0


def feature_matrix(x: np.ndarray, beta, alpha, c) -> np.ndarray:
    """Features X_j(x) = (psi(z), beta x.grad psi(z), beta grad psi(z)), z = alpha x + c.

    Returns shape (g, m * (2 + d)), columns grouped per sample.
    """
    g, d = x.shape
    m = beta.size
    pr = support_pairs(x, alpha, c)
    width = 2 + d
    out = np.zeros((g, m * width))
    col = pr.neuron * width
    b = beta[pr.neuron]
    out[pr.node, col] = pr.psi
    out[pr.node, col + 1] = b * np.einsum("pj,pj->p", x[pr.node], pr.dpsi)
    for j in range(d):
        out[pr.node, col + 2 + j] = b * pr.dpsi[:, j]
    return out


def empirical_kernel(grid, m: int, seed: int, dim: Optional[int] = None, chunk: int = 4096,
                     sampler=None) -> KernelEstimate:
    """Monte Carlo estimate of Z on ``grid`` from ``m`` initialisation draws."""
    if isinstance(grid, QuadratureRule):
        grid = grid.nodes
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    g, d = grid.shape
    if m < 1000:
        raise ValueError("kernel estimation needs m >= 1000 samples")
    rng = np.random.default_rng(seed)
    draw = sampler if sampler is not None else (lambda r, k: sample_neurons(r, k, d))
    # batch means give the standard error without storing per-sample products
    n_batches = min(BATCHES, m // chunk) if m >= 2 * chunk else BATCHES
    edges = np.linspace(0, m, n_batches + 1).astype(int)
    acc = np.zeros((g, g))
    batch_means = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        part = np.zeros((g, g))
        for start in range(lo, hi, chunk):
            k = min(chunk, hi - start)
            beta, alpha, c = draw(rng, k)
            phi = feature_matrix(grid, beta, alpha, c)
            part += phi @ phi.T
        acc += part
        batch_means.append(part / (hi - lo))
    z = acc / m
    z = 0.5 * (z + z.T)
    spread = np.std(np.array(batch_means), axis=0, ddof=1)
    se = spread / math.sqrt(len(batch_means))
    return KernelEstimate(grid, z, se, m, seed)


@dataclass
class GridFunction:
    values: np.ndarray
    rule: QuadratureRule

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("grid function has non-finite entries")


@dataclass
class GridQuadratic:
    """Discrete energy  I(w) = 1/2 w^T H w - b^T w + const  on grid functions."""

    ctx: EnergyContext
    calc: GridCalculus
    H: sparse.csr_matrix  # = G, the modified Gram matrix
    b: np.ndarray
    const: float

    @classmethod
    def build(cls, ctx: EnergyContext) -> "GridQuadratic":
        rule = ctx.rule
        calc = GridCalculus.build(rule)
        a_cells, r_cells, _ = ctx.spec.coefficients(calc.cell_centres)
        _, r_nodes, _ = ctx.spec.coefficients_at(rule)
        stiff = calc.stiffness(a_cells) + calc.mass(r_nodes)
        mass = calc.mass()
        H = (mass + ctx.h * stiff).tocsr()
        w = rule.weights
        U = ctx.prev_data.values
        b = w * U - ctx.h * w * ctx.f_prev
        const = 0.5 * float(np.sum(w * U * U))
        return cls(ctx, calc, H, b, const)

    @property
    def gram(self):
        return self.H

    def loss(self, w: np.ndarray) -> float:
        return 0.5 * float(w @ (self.H @ w)) - float(self.b @ w) + self.const

    def gradient(self, w: np.ndarray) -> np.ndarray:
        """Entry a is the Frechet pairing <DI(w), e_a> with the grid basis function e_a."""
        return self.H @ w - self.b

    def pair(self, v: np.ndarray, u: np.ndarray) -> float:
        return float(self.gradient(v) @ u)


def grid_minimizer(ctx: EnergyContext, quad: Optional[GridQuadratic] = None,
                   check_definite: bool = True) -> GridFunction:
    """Solve the discrete backward Euler step (M + h A) w = M U - h M F(U)."""
    quad = quad if quad is not None else GridQuadratic.build(ctx)
    H = quad.H.tocsc()
    if check_definite and H.shape[0] <= 4000:
        try:
            linalg.cholesky(H.toarray())
        except linalg.LinAlgError as exc:
            raise ValueError("discrete quadratic is not positive definite; check h < 1/(2 lambda_2)") from exc
    w = splu(H).solve(quad.b)
    resid = np.linalg.norm(quad.H @ w - quad.b) / max(np.linalg.norm(quad.b), 1e-300)
    if resid > 1e-10:
        raise ValueError(f"linear solve residual {resid:.2e} exceeds 1e-10")
    return GridFunction(w, ctx.rule)


def gradient_descent_minimizer(quad: GridQuadratic, steps: int = 100_000, w0=None) -> np.ndarray:
    """Plain gradient descent on the discrete quadratic (independent check of the linear solve)."""
    H = quad.H
    lam_max = float(sparse.linalg.eigsh(H, k=1, which="LA", return_eigenvectors=False)[0])
    tau = 1.0 / lam_max
    w = np.zeros(H.shape[0]) if w0 is None else np.array(w0, dtype=float)
    for _ in range(steps):
        w = w - tau * (H @ w - quad.b)
    return w


def build_Ttilde(kernel: KernelEstimate, ctx: EnergyContext, quad: Optional[GridQuadratic] = None):
    """Matrix T (with (T v)_a = <v, Z(x_a, .)>_Htilde) and the Htilde Gram matrix G."""
    if kernel.grid.shape != ctx.rule.nodes.shape or not np.array_equal(kernel.grid, ctx.rule.nodes):
        raise ValueError("kernel grid does not match the quadrature nodes of the energy context")
    quad = quad if quad is not None else GridQuadratic.build(ctx)
    G = quad.H.toarray()
    T = kernel.Z @ G
    return T, G


def self_adjoint_defect(T: np.ndarray, G: np.ndarray) -> float:
    return float(np.max(np.abs(G @ T - T.T @ G)))


@dataclass
class SpectralFlow:
    eigvals: np.ndarray  # descending
    eigvecs: np.ndarray  # columns, G-orthonormal
    h0: np.ndarray
    w_star: np.ndarray
    G: np.ndarray

    def coefficients(self, t: float) -> np.ndarray:
        return np.exp(-self.eigvals * t) * self.h0

    def evaluate(self, t: float) -> np.ndarray:
        """V_t - w_*."""
        return self.eigvecs @ self.coefficients(t)

    def trajectory(self, t: float) -> np.ndarray:
        return self.w_star + self.evaluate(t)

    def norm_sq(self, t: float) -> float:
        """||V_t - w_*||^2 in the Htilde norm."""
        c = self.coefficients(t)
        return float(np.sum(c * c))

    def dump_rows(self):
        return [{"i": i, "gamma": float(g), "h0": float(c)} for i, (g, c) in
                enumerate(zip(self.eigvals, self.h0))]


def spectral_flow(T: np.ndarray, G: np.ndarray, V0: np.ndarray, w_star: np.ndarray) -> SpectralFlow:
    """Eigen-solution of d(V - w_*)/dt = -T (V - w_*)."""
    A = G @ T
    A = 0.5 * (A + A.T)
    try:
        gam, vecs = linalg.eigh(A, G)
    except linalg.LinAlgError as exc:
        raise RuntimeError("generalised eigensolver failed") from exc
    order = np.argsort(gam)[::-1]
    gam, vecs = gam[order], vecs[:, order]
    h0 = vecs.T @ (G @ (np.asarray(V0, float) - np.asarray(w_star, float)))
    return SpectralFlow(gam, vecs, h0, np.asarray(w_star, float), G)


def _power_radius(T: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(T.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = T @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        lam = nrm / np.linalg.norm(v)
        v = w / nrm
    return float(lam)


def direct_flow(T: np.ndarray, G: np.ndarray, V0: np.ndarray, w_star: np.ndarray, t_grid: Sequence[float],
                courant: float = 0.02, max_retries: int = 10):
    """Classical RK4 for d(V - w_*)/dt = -T (V - w_*); returns V at each time of ``t_grid``."""
    times = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("t_grid must be nonnegative and sorted")
    rho = _power_radius(T)
    dt0 = courant / rho if rho > 0 else math.inf
    y0 = np.asarray(V0, float) - np.asarray(w_star, float)

    def hnorm(y):
        return float(y @ (G @ y))

    for attempt in range(max_retries + 1):
        dt_max = dt0 / 2**attempt
        y, t = y0.copy(), 0.0
        out, stable = [], True
        last = hnorm(y)
        for target in times:
            span = target - t
            nsub = max(1, int(math.ceil(span / dt_max))) if span > 0 else 0
            step = span / nsub if nsub else 0.0
            for _ in range(nsub):
                k1 = -(T @ y)
                k2 = -(T @ (y + 0.5 * step * k1))
                k3 = -(T @ (y + 0.5 * step * k2))
                k4 = -(T @ (y + step * k3))
                y = y + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                cur = hnorm(y)
                if not np.isfinite(cur) or cur > last * (1 + 1e-9) + 1e-300:
                    stable = False
                    break
                last = cur
            if not stable:
                break
            t = target
            out.append(w_star + y)
        if stable:
            return np.array(out)
    raise RuntimeError(f"direct flow unstable after {max_retries} step halvings")


# --- finite n versus the limit ----------------------------------------------


@dataclass
class WideLimitSetup:
    ctx: EnergyContext
    quad: GridQuadratic
    kernel: KernelEstimate
    flow: SpectralFlow
    h1_gram: sparse.csr_matrix = field(repr=False)

    def limit(self, t: float) -> np.ndarray:
        return self.flow.trajectory(t)

    def h1_norm(self, v: np.ndarray) -> float:
        return math.sqrt(max(float(v @ (self.h1_gram @ v)), 0.0))


def limit_setup(ctx: EnergyContext, m: int, seed: int) -> WideLimitSetup:
    quad = GridQuadratic.build(ctx)
    kernel = empirical_kernel(ctx.rule, m, seed)
    T, G = build_Ttilde(kernel, ctx, quad)
    w_star = grid_minimizer(ctx, quad, check_definite=False).values
    flow = spectral_flow(T, G, np.zeros_like(w_star), w_star)
    return WideLimitSetup(ctx, quad, kernel, flow, quad.calc.h1_gram())


def finite_trajectory(setup: WideLimitSetup, n: int, delta: float, seed: int, t_probe: Sequence[float],
                      flow_dt: float, traces: Optional[list] = None):
    """Train a width-n network from an (NNI) draw and sample it on the grid at ``t_probe``.

    Training traces of every segment are appended to ``traces`` when given.
    """
    ctx = setup.ctx
    x = ctx.rule.nodes
    net = init_params(n, delta, None, seed, ctx.spec.dim)
    out, t = [], 0.0
    for target in t_probe:
        if target > t:
            cfg = FlowConfig(dt=flow_dt, t_end=target - t, growth=1.0)
            net, trace = train(ctx, net, cfg)
            if traces is not None:
                traces.append(trace)
            t = target
        out.append(net.values(x))
    return np.array(out)


def compare_wide_limit(setup: WideLimitSetup, n_list: Sequence[int], t_probe: Sequence[float], trials: int,
                       seed: int, delta: float = 0.75, flow_dt: float = 0.01, traces: Optional[list] = None):
    """Mean (over trials) grid H1 distance between finite-n training and the limit flow.

    Returns (rows, summary): rows of (n, t, mean_error, std_error) and per-n
    sup over t of the mean error.
    """
    if trials < 5:
        raise ValueError("need at least 5 trials")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing")
    t_probe = sorted(float(t) for t in t_probe)
    limit = np.array([setup.limit(t) for t in t_probe])
    rows, summary = [], []
    for i, n in enumerate(n_list):
        errs = np.empty((trials, len(t_probe)))
        for j in range(trials):
            traj = finite_trajectory(setup, n, delta, seed + 1000 * i + j, t_probe, flow_dt, traces)
            errs[j] = [setup.h1_norm(v - lim) for v, lim in zip(traj, limit)]
        mean = errs.mean(axis=0)
        se = errs.std(axis=0, ddof=1) / math.sqrt(trials)
        for t, mu, s in zip(t_probe, mean, se):
            rows.append({"n": n, "t": t, "mean_error": float(mu), "std_error": float(s)})
        k = int(np.argmax(mean))
        summary.append({"n": n, "sup_mean_error": float(mean[k]), "std_error": float(se[k]), "t_at_sup": t_probe[k]})
    return rows, summary
