"""Single-hidden-layer bump networks with clipped parameters.

    V(theta; x) = n^{-delta} * sum_i beta_i psi(alpha_i x + c_i)

with (beta_i, alpha_i, c_i) clipped into [-r, r] (and |alpha_i| >= 1/r) before
every evaluation.  Raw parameters are stored; the gradient flow moves them.

Evaluation only visits (node, neuron) pairs inside the neuron's support,
which keeps wide networks on fine grids cheap.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from .activation import bump


@dataclass(frozen=True)
class NeuronParams:
    beta: float
    alpha: float
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))
        if self.alpha == 0:
            raise ValueError("alpha must be nonzero")


def _clip_alpha(alpha, r):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha == 0):
        raise ValueError("alpha must be nonzero")
    pos = np.maximum(np.minimum(alpha, r), 1.0 / r)
    neg = np.maximum(np.minimum(alpha, -1.0 / r), -r)
    return np.where(alpha > 0, pos, neg)


def clip_arrays(beta, alpha, c, r):
    """Clipped copies of raw parameter arrays."""
    return np.clip(beta, -r, r), _clip_alpha(alpha, r), np.clip(c, -r, r)


def clip(p: NeuronParams, r: float) -> NeuronParams:
    if not r > 1:
        raise ValueError(f"clip radius must exceed 1, got {r}")
    b, a, c = clip_arrays(p.beta, p.alpha, p.c, r)
    return NeuronParams(float(b), float(a), c)


@dataclass
class ParamGradient:
    """Unscaled gradient of one neuron beta*psi(alpha x + c) at a batch of points."""

    d_beta: np.ndarray  # (M,)
    d_alpha: np.ndarray  # (M,)
    d_c: np.ndarray  # (M, d)
    mask_beta: bool
    mask_alpha: bool
    mask_c: np.ndarray  # (d,)

    def stacked(self) -> np.ndarray:
        """(M, 2 + d) rows ordered (beta, alpha, c_1..c_d)."""
        return np.column_stack([self.d_beta, self.d_alpha, self.d_c])


@dataclass
class SupportPairs:
    """(node, neuron) pairs with the neuron's argument inside the unit ball."""

    node: np.ndarray
    neuron: np.ndarray
    z: np.ndarray  # (P, d)
    psi: np.ndarray
    dpsi: np.ndarray
    hpsi: Optional[np.ndarray]
    n_points: int


def support_pairs(x: np.ndarray, alpha_hat: np.ndarray, c_hat: np.ndarray,
                  hessian: bool = False, gradient: bool = True) -> SupportPairs:
    """Locate and evaluate every point/neuron pair inside a neuron's support.

    Candidates are found from the support's extent along the first coordinate
    (binary search on sorted points) and then filtered exactly.
    """
    x = np.asarray(x, dtype=float)
    n, d = c_hat.shape
    order = np.argsort(x[:, 0], kind="stable")
    xs = x[order, 0]
    lo = np.minimum((-1.0 - c_hat[:, 0]) / alpha_hat, (1.0 - c_hat[:, 0]) / alpha_hat)
    hi = np.maximum((-1.0 - c_hat[:, 0]) / alpha_hat, (1.0 - c_hat[:, 0]) / alpha_hat)
    start = np.searchsorted(xs, lo, side="left")
    stop = np.searchsorted(xs, hi, side="right")
    counts = stop - start
    total = int(counts.sum())
    neuron = np.repeat(np.arange(n), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    offs = np.arange(total) - first + np.repeat(start, counts)
    node = order[offs]
    z = alpha_hat[neuron, None] * x[node] + c_hat[neuron]
    act = bump(d)
    keep = np.einsum("ij,ij->i", z, z) < 1.0
    node, neuron, z = node[keep], neuron[keep], z[keep]
    if hessian:
        psi, dpsi, hpsi = act.all_derivatives(z)
    elif gradient:
        psi, dpsi, hpsi = act.value(z), act.grad(z), None
    else:
        psi, dpsi, hpsi = act.value(z), None, None
    return SupportPairs(node, neuron, z, psi, dpsi, hpsi, x.shape[0])


def _scatter(index, vals, length):
    """Deterministic segmented sum; ``vals`` may have trailing axes."""
    if vals.ndim == 1:
        return np.bincount(index, weights=vals, minlength=length)
    flat = vals.reshape(vals.shape[0], -1)
    out = np.stack([np.bincount(index, weights=flat[:, k], minlength=length)
                    for k in range(flat.shape[1])], axis=-1)
    return out.reshape((length,) + vals.shape[1:])


@dataclass
class ShallowNetwork:
    """Raw parameters of a width-n bump network plus its scaling hyperparameters."""

    beta: np.ndarray
    alpha: np.ndarray
    c: np.ndarray
    delta: float = 0.75
    clip_radius: Optional[float] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        c = np.asarray(self.c, dtype=float)
        self.c = c.reshape(self.beta.size, -1)
        n = self.beta.size
        if n < 1 or self.alpha.size != n:
            raise ValueError("beta, alpha and c must describe the same number (>= 1) of neurons")
        if not 0.5 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (1/2, 1), got {self.delta}")
        if self.clip_radius is None:
            self.clip_radius = default_clip_radius(n)
        if not self.clip_radius > 1.0:
            raise ValueError(f"clip radius must exceed 1, got {self.clip_radius}")
        if np.any(self.alpha == 0):
            raise ValueError("alpha must be nonzero for every neuron")

    # -- shape and scaling -------------------------------------------------
    @property
    def n(self) -> int:
        return self.beta.size

    @property
    def dim(self) -> int:
        return self.c.shape[1]

    @property
    def scale(self) -> float:
        return float(self.n) ** (-self.delta)

    @property
    def learning_rate(self) -> float:
        """eta_n = n^(2 delta - 1)."""
        return float(self.n) ** (2.0 * self.delta - 1.0)

    @property
    def neurons(self) -> list:
        return [NeuronParams(float(b), float(a), c.copy()) for b, a, c in zip(self.beta, self.alpha, self.c)]

    def clipped(self):
        return clip_arrays(self.beta, self.alpha, self.c, self.clip_radius)

    def masks(self):
        r = self.clip_radius
        mb = np.abs(self.beta) <= r
        ma = (np.abs(self.alpha) >= 1.0 / r) & (np.abs(self.alpha) <= r)
        mc = np.abs(self.c) <= r
        return mb, ma, mc

    # -- flat parameter vector ----------------------------------------------
    def flat(self) -> np.ndarray:
        """(beta_1..beta_n, alpha_1..alpha_n, c_1, ..., c_n) of length (2 + d) n."""
        return np.concatenate([self.beta, self.alpha, self.c.ravel()])

    def with_flat(self, theta: np.ndarray) -> "ShallowNetwork":
        n, d = self.n, self.dim
        theta = np.asarray(theta, dtype=float)
        if theta.size != (2 + d) * n:
            raise ValueError(f"expected {(2 + d) * n} parameters, got {theta.size}")
        return ShallowNetwork(theta[:n].copy(), theta[n:2 * n].copy(), theta[2 * n:].reshape(n, d).copy(),
                              self.delta, self.clip_radius, self.seed, dict(self.meta))

    def copy(self) -> "ShallowNetwork":
        return self.with_flat(self.flat())

    # -- evaluation --------------------------------------------------------
    def pairs(self, x, hessian: bool = False, gradient: bool = True) -> SupportPairs:
        x = _as_points(x, self.dim)
        _, ah, ch = self.clipped()
        return support_pairs(x, ah, ch, hessian, gradient)

    def values(self, x, pairs: Optional[SupportPairs] = None) -> np.ndarray:
        pr = pairs if pairs is not None else self.pairs(x, gradient=False)
        bh, _, _ = self.clipped()
        return self.scale * _scatter(pr.node, bh[pr.neuron] * pr.psi, pr.n_points)

    def gradients(self, x, pairs: Optional[SupportPairs] = None) -> np.ndarray:
        pr = pairs if pairs is not None else self.pairs(x)
        bh, ah, _ = self.clipped()
        contrib = (bh * ah)[pr.neuron, None] * pr.dpsi
        return self.scale * _scatter(pr.node, contrib, pr.n_points).reshape(pr.n_points, self.dim)

    __call__ = values

    def param_grad(self, x, i: int) -> ParamGradient:
        """Unscaled X^i(x) = grad_theta_i of beta_i psi(alpha_i x + c_i), with clip indicators."""
        x = _as_points(x, self.dim)
        bh, ah, ch = self.clipped()
        mb, ma, mc = self.masks()
        act = bump(self.dim)
        z = ah[i] * x + ch[i]
        psi, dpsi = act.value(z), act.grad(z)
        d_beta = psi * mb[i]
        d_alpha = bh[i] * np.einsum("ij,ij->i", x, dpsi) * ma[i]
        d_c = bh[i] * dpsi * mc[i]
        return ParamGradient(d_beta, d_alpha, d_c, bool(mb[i]), bool(ma[i]), mc[i].copy())

    def param_grad_spatial(self, x, i: int) -> np.ndarray:
        """Spatial Jacobian of X^i: shape (M, 2 + d, d)."""
        x = _as_points(x, self.dim)
        bh, ah, ch = self.clipped()
        mb, ma, mc = self.masks()
        act = bump(self.dim)
        z = ah[i] * x + ch[i]
        _, dpsi, hpsi = act.all_derivatives(z)
        row_beta = ah[i] * dpsi * mb[i]
        row_alpha = bh[i] * (dpsi + ah[i] * np.einsum("mjk,mk->mj", hpsi, x)) * ma[i]
        row_c = bh[i] * ah[i] * hpsi * mc[i][None, :, None]
        return np.concatenate([row_beta[:, None, :], row_alpha[:, None, :], row_c], axis=1)

    def pair_gradient(self, pr: SupportPairs, x: np.ndarray, s: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Flat vector of n^{-delta} * sum_m [s_m X^i(x_m) + q_m . grad_x X^i(x_m)].

        This is the parameter gradient of any functional whose first variation
        at the nodes has the form  du -> sum s du + q . grad du.  ``pr`` must
        be computed with ``hessian=True``.
        """
        bh, ah, _ = self.clipped()
        mb, ma, mc = self.masks()
        nrn, node = pr.neuron, pr.node
        sp, qp, xp = s[node], q[node], x[node]
        a_p, b_p = ah[nrn], bh[nrn]
        q_dpsi = np.einsum("pj,pj->p", qp, pr.dpsi)
        hq = np.einsum("pjk,pk->pj", pr.hpsi, qp)
        g_beta = sp * pr.psi + a_p * q_dpsi
        g_alpha = b_p * (sp * np.einsum("pj,pj->p", xp, pr.dpsi) + q_dpsi + a_p * np.einsum("pj,pj->p", xp, hq))
        g_c = b_p[:, None] * (sp[:, None] * pr.dpsi + a_p[:, None] * hq)
        n = self.n
        gb = _scatter(nrn, g_beta, n) * mb
        ga = _scatter(nrn, g_alpha, n) * ma
        gc = _scatter(nrn, g_c, n).reshape(n, self.dim) * mc
        return self.scale * np.concatenate([gb, ga, gc.ravel()])

    # -- persistence -------------------------------------------------------
    def save(self, path) -> Path:
        """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian float64 rows)."""
        path = Path(path)
        payload = np.column_stack([self.beta, self.alpha, self.c]).astype("<f8")
        raw = payload.tobytes(order="C")
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(raw)
        header = {
            "format": "dgflow-network-v1",
            "n": self.n,
            "d": self.dim,
            "delta": self.delta,
            "clip_radius": self.clip_radius,
            "seed": self.seed,
            "columns": ["beta", "alpha"] + [f"c_{j + 1}" for j in range(self.dim)],
            "dtype": "<f8",
            "payload": bin_path.name,
            "sha256": hashlib.sha256(raw).hexdigest(),
            "meta": self.meta,
        }
        json_path = path.with_suffix(".json")
        json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        return json_path

    @classmethod
    def load(cls, path) -> "ShallowNetwork":
        json_path = Path(path).with_suffix(".json")
        header = json.loads(json_path.read_text())
        raw = (json_path.parent / header["payload"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != header["sha256"]:
            raise ValueError(f"checksum mismatch for {json_path}")
        n, d = header["n"], header["d"]
        payload = np.frombuffer(raw, dtype=header["dtype"]).reshape(n, 2 + d).astype(float)
        return cls(payload[:, 0].copy(), payload[:, 1].copy(), payload[:, 2:].copy(), header["delta"],
                   header["clip_radius"], header["seed"], header.get("meta", {}))


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    if x.ndim == 1:
        x = x[:, None] if dim == 1 else x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"points must have trailing dimension {dim}, got {x.shape}")
    return x


def default_clip_radius(n: int) -> float:
    return math.log(n)


def learning_rate(n: int, delta: float) -> float:
    return float(n) ** (2.0 * delta - 1.0)


def init_params(n: int, delta: float = 0.75, clip_radius: Optional[float] = None, seed: int = 0,
                dim: int = 1) -> ShallowNetwork:
    """i.i.d. neurons: beta ~ U(-1, 1), alpha = S sqrt(G) with G ~ Gamma((d+4)/2, 1), c ~ N(0, I_d)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.5 < delta < 1.0:
        raise ValueError(f"delta must lie in (1/2, 1), got {delta}")
    r = default_clip_radius(n) if clip_radius is None else float(clip_radius)
    if r > math.log(n) + 1e-12:
        raise ValueError(f"clip radius {r} exceeds log(n) = {math.log(n):.6g}")
    rng = np.random.default_rng(seed)
    beta, alpha, c = sample_neurons(rng, n, dim)
    return ShallowNetwork(beta, alpha, c, delta, r, seed)


def sample_neurons(rng: np.random.Generator, m: int, dim: int):
    beta = rng.uniform(-1.0, 1.0, m)
    sign = rng.choice(np.array([-1.0, 1.0]), m)
    g = rng.gamma((dim + 4) / 2.0, 1.0, m)
    alpha = sign * np.sqrt(g)
    c = rng.standard_normal((m, dim))
    return beta, alpha, c


# --- moment checks for initialisation laws ---------------------------------


def analytic_moments(dim: int) -> dict:
    """Moments of the default initialisation law."""
    k = (dim + 4) / 2.0
    p_alpha = dim + 7
    p_c = dim + 7
    return {
        "beta_sq": 1.0 / 3.0,
        "alpha_pos": math.exp(special.gammaln(k + p_alpha / 2.0) - special.gammaln(k)),
        "alpha_neg": math.exp(special.gammaln(k - (dim + 2) / 2.0) - special.gammaln(k)),
        "c_pos": 2.0 ** (p_c / 2.0) * math.exp(special.gammaln((dim + p_c) / 2.0) - special.gammaln(dim / 2.0)),
    }


@dataclass
class MomentReport:
    n_samples: int
    dim: int
    beta_sq: float
    alpha_pos: float
    alpha_neg: float
    c_pos: float
    symmetry: float
    analytic: dict
    prefix_alpha_neg: list
    symmetry_flag: bool
    divergence_flags: dict

    @property
    def ok(self) -> bool:
        return not self.symmetry_flag and not any(self.divergence_flags.values())


MIN_SAMPLES = 10**4


def validate_init(samples, dim: Optional[int] = None, symmetry_tol: float = 0.02) -> MomentReport:
    """Empirical (NNI) moments of a list of neurons, or of a (beta, alpha, c) tuple of arrays."""
    if isinstance(samples, tuple):
        beta, alpha, c = (np.asarray(a, dtype=float) for a in samples)
    else:
        beta = np.array([p.beta for p in samples], dtype=float)
        alpha = np.array([p.alpha for p in samples], dtype=float)
        c = np.array([p.c for p in samples], dtype=float)
    n = beta.size
    if n < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {n}")
    c = c.reshape(n, -1)
    d = c.shape[1] if dim is None else dim
    with np.errstate(divide="ignore", over="ignore"):
        a_abs = np.abs(alpha)
        neg = a_abs ** (-(d + 2.0))
        moments = {
            "beta_sq": float(np.mean(beta**2)),
            "alpha_pos": float(np.mean(a_abs ** (d + 7.0))),
            "alpha_neg": float(np.mean(neg)),
            "c_pos": float(np.mean(np.linalg.norm(c, axis=1) ** (d + 7.0))),
        }
        prefix = [float(np.mean(neg[: n // 16])), float(np.mean(neg[: n // 4])), moments["alpha_neg"]]
    sd = float(np.std(beta))
    symmetry = abs(float(np.mean(beta))) / sd if sd > 0 else math.inf
    ref = analytic_moments(d)
    flags = {k: (not math.isfinite(v)) or v > 10.0 * ref[k] for k, v in moments.items()}
    return MomentReport(n, d, moments["beta_sq"], moments["alpha_pos"], moments["alpha_neg"], moments["c_pos"],
                        symmetry, ref, prefix, symmetry > symmetry_tol, flags)
