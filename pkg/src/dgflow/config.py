"""Run configuration: a flat JSON object of scalar/list fields with schema validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .functions import BumpFunction, GaussianDensity, SumFunction
from .network import default_clip_radius, learning_rate
from .operators import CATALOG, OperatorSpec, closed_form_constants
from .quadrature import Box, QuadratureRule, default_box, monte_carlo, tensor_grid


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    # problem
    problem: str = "heat"
    dim: int = 1
    kappa: float = 1.0
    sigma: float = 0.4
    rate: float = 0.05
    eta: float = 0.3
    rho: float = -0.5
    kappa_v: float = 1.5
    theta: float = 0.04
    lam: float = 0.5
    jump_mean: float = 0.0
    jump_var: float = 0.1
    epsilon: float = 1.0
    lambda2: Optional[float] = None
    u0: str = "bump"
    u0_centre: float = 0.0
    u0_width: float = 1.0
    u0_height: float = 1.0
    box_half_width: Optional[float] = None
    # network
    n: int = 256
    delta: float = 0.75
    clip_radius: Optional[float] = None
    # quadrature
    quad_kind: str = "grid"
    quad_spacing: float = 0.02
    quad_points: int = 20000
    jump_samples: int = 2000
    # flow
    flow_dt: float = 0.5
    flow_t_end: float = 20000.0
    flow_backoff: float = 0.5
    flow_max_backoffs: int = 30
    flow_grad_tol: float = 1e-6
    flow_growth: float = 1.1
    flow_max_dt: Optional[float] = None
    # time stepping
    T: float = 0.1
    K: int = 8
    warm_start: bool = False
    # experiments
    sweep: str = "K"
    K_list: list = field(default_factory=lambda: [4, 8, 16])
    n_list: list = field(default_factory=lambda: [64, 256, 1024])
    t_probe: list = field(default_factory=lambda: [0.0, 2.0, 5.0, 10.0, 20.0])
    trials: int = 5
    kernel_samples: int = 100000
    kernel_points: int = 32
    kernel_half_width: float = 4.0
    limit_dt: float = 0.05
    assumption_trials: int = 100
    seed: int = 0
    out: str = "out"

    @property
    def h(self) -> float:
        return self.T / self.K

    @property
    def r_n(self) -> float:
        return self.clip_radius if self.clip_radius is not None else default_clip_radius(self.n)

    @property
    def eta_n(self) -> float:
        return learning_rate(self.n, self.delta)

    def box(self) -> Box:
        if self.box_half_width is not None:
            return Box.cube(self.box_half_width, self.dim)
        return default_box(self.r_n, self.dim)

    def to_dict(self) -> dict:
        return asdict(self)


_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("int",)}
_LIST_FIELDS = {"K_list", "n_list", "t_probe"}
_BOOL_FIELDS = {"warm_start"}
_STR_FIELDS = {"problem", "u0", "quad_kind", "sweep", "out"}


def _coerce(name, value):
    if name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if name in _LIST_FIELDS:
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{name}: expected a nonempty list")
        return [int(v) if name != "t_probe" else float(v) for v in value]
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if name in _INT_FIELDS:
        if int(value) != value:
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.problem not in CATALOG:
        raise ConfigError(f"problem: unknown operator {cfg.problem!r}; choose from {sorted(CATALOG)}")
    if not 0.5 < cfg.delta < 1:
        raise ConfigError(f"delta: {cfg.delta} outside the admissible range 1/2 < delta < 1")
    if cfg.n < 1:
        raise ConfigError("n: network width must be positive")
    if cfg.clip_radius is not None and not 1 < cfg.clip_radius <= math.log(cfg.n) + 1e-12:
        raise ConfigError(f"clip_radius: need 1 < r_n <= log n = {math.log(cfg.n):.6g}, got {cfg.clip_radius}")
    if cfg.r_n <= 1:
        raise ConfigError(f"n: log n = {cfg.r_n:.4g} must exceed 1 for the clipping interval to be nonempty")
    if cfg.dim < 1:
        raise ConfigError("dim: must be positive")
    if cfg.problem in ("heston", "allen_cahn") and cfg.dim != 2:
        raise ConfigError(f"dim: {cfg.problem} is two-dimensional")
    if cfg.K < 1 or not cfg.T > 0:
        raise ConfigError("T, K: need T > 0 and K >= 1")
    for name in ("flow_dt", "flow_t_end", "quad_spacing", "u0_width", "limit_dt"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name}: must be positive")
    if not 0 < cfg.flow_backoff < 1:
        raise ConfigError("flow_backoff: must lie in (0, 1)")
    if cfg.flow_growth < 1:
        raise ConfigError("flow_growth: must be >= 1")
    if cfg.quad_kind not in ("grid", "monte_carlo"):
        raise ConfigError("quad_kind: must be 'grid' or 'monte_carlo'")
    if cfg.u0 not in ("bump", "two_bumps", "gaussian"):
        raise ConfigError("u0: must be 'bump', 'two_bumps' or 'gaussian'")
    if cfg.sweep not in ("K", "n"):
        raise ConfigError("sweep: must be 'K' or 'n'")
    if cfg.trials < 5:
        raise ConfigError("trials: at least 5 trials are required")
    if any(b <= a for a, b in zip(cfg.n_list, cfg.n_list[1:])):
        raise ConfigError("n_list: must be strictly increasing")
    if any(v < 1 for v in cfg.K_list):
        raise ConfigError("K_list: entries must be positive")
    if cfg.kernel_samples < 1000:
        raise ConfigError("kernel_samples: need at least 1000")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    lam2 = cfg.lambda2
    if lam2 is None:
        try:
            ref = closed_form_constants(build_operator(cfg))
        except ValueError as exc:
            raise ConfigError(f"problem parameters: {exc}") from exc
        lam2 = ref.lambda2 if ref is not None else None
    if lam2 is not None and lam2 > 0:
        for K in {cfg.K, *cfg.K_list}:
            h = cfg.T / K
            if not h < 1.0 / (2.0 * lam2):
                raise ConfigError(f"T, K: step h = {h:.6g} violates h < 1/(2 lambda_2) = {1 / (2 * lam2):.6g}")
    return cfg


def from_dict(data: dict) -> RunConfig:
    if "config" in data and isinstance(data["config"], dict):  # a run manifest
        data = data["config"]
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v) for k, v in data.items()}
    return validate(RunConfig(**kwargs))


def load_config(path) -> RunConfig:
    """Read and validate a flat JSON config (or the ``config`` block of a manifest)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(data)


# --- builders ---------------------------------------------------------------


def build_operator(cfg: RunConfig) -> OperatorSpec:
    p = cfg.problem
    if p == "heat":
        return CATALOG[p](cfg.kappa, cfg.dim)
    if p == "black_scholes":
        return CATALOG[p](cfg.sigma, cfg.rate, cfg.dim)
    if p == "heston":
        return CATALOG[p](cfg.rate, cfg.eta, cfg.rho, cfg.kappa_v, cfg.theta)
    if p == "merton":
        return CATALOG[p](cfg.sigma, cfg.rate, cfg.lam, cfg.jump_mean, cfg.jump_var, dim=cfg.dim)
    if p == "allen_cahn":
        return CATALOG[p](cfg.epsilon, cfg.dim)
    return CATALOG[p](cfg.dim)


def build_initial(cfg: RunConfig):
    if cfg.u0 == "bump":
        return BumpFunction(cfg.dim, cfg.u0_centre, cfg.u0_width, cfg.u0_height)
    if cfg.u0 == "two_bumps":
        shift = 1.5 * cfg.u0_width
        return SumFunction(BumpFunction(cfg.dim, cfg.u0_centre - shift, cfg.u0_width, cfg.u0_height),
                           BumpFunction(cfg.dim, cfg.u0_centre + shift, cfg.u0_width, cfg.u0_height))
    return GaussianDensity(cfg.u0_width**2, cfg.dim, cfg.u0_centre)


def build_rule(cfg: RunConfig, seed: int, box: Optional[Box] = None) -> QuadratureRule:
    box = box if box is not None else cfg.box()
    if cfg.quad_kind == "grid":
        m = [max(2, int(round((hi - lo) / cfg.quad_spacing))) for lo, hi in zip(box.lower, box.upper)]
        return tensor_grid(box, m)
    return monte_carlo(box, cfg.quad_points, seed)


def derived(cfg: RunConfig) -> dict:
    box = cfg.box()
    return {
        "h": cfg.h,
        "eta_n": cfg.eta_n,
        "r_n": cfg.r_n,
        "box_lower": [float(v) for v in box.lower],
        "box_upper": [float(v) for v in box.upper],
    }


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed: child ``STAGES[stage]`` of the master seed sequence.

    Stages are numbered once and never renumbered, so adding a new stage
    leaves the randomness of every existing one unchanged.
    """
    index = STAGES[stage]
    ss = np.random.SeedSequence(entropy=master, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


STAGES = {
    "network_init": 0,
    "quadrature": 1,
    "jump_samples": 2,
    "kernel": 3,
    "trials": 4,
    "assumption_trials": 5,
}
