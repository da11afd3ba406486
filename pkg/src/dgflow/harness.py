"""Experiment orchestration behind the command line.

Each subcommand writes CSV tables, JSON side files and a ``manifest.json``
holding the resolved config, derived quantities, per-stage seeds and a hash
index of every output.  Feeding the manifest back as ``--config`` reruns the
same experiment and reproduces the CSVs byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import (ConfigError, RunConfig, build_initial, build_operator, build_rule, derived, stage_seed)
from .energy import EnergyContext, StepSizeError
from .network import init_params
from .operators import estimate_constants, merton_jump_bound, merton_jump_ratio, closed_form_constants
from .quadrature import Box, tensor_grid
from .reference import ConvergenceError, bs_solution, error_report, heat_solution
from .training import FlowConfig, TimeStepConfig, TrainingStall, solve_pde, train
from .widelimit import (build_Ttilde, compare_wide_limit, direct_flow, empirical_kernel, grid_minimizer,
                        limit_setup, spectral_flow)

log = logging.getLogger(__name__)

SUBCOMMANDS = ("solve", "flow", "kernel", "spectra", "converge", "check-assumptions")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERICAL_ERRORS = (FloatingPointError, TrainingStall, ConvergenceError, np.linalg.LinAlgError, RuntimeError,
                    ArithmeticError)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class OutputWriter:
    """Single writer for all run artefacts; keeps a hash index for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index = []

    def _register(self, path: Path, kind: str):
        data = path.read_bytes()
        self.index.append({"path": str(path.relative_to(self.root)), "kind": kind, "bytes": len(data),
                           "sha256": hashlib.sha256(data).hexdigest()})

    def csv(self, name: str, columns: Sequence[tuple], rows: Sequence[dict]) -> Path:
        """``columns`` are (key, unit, producer) triples; the header cell reads ``key [unit] (producer)``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow([f"{key} [{unit}] ({producer})" for key, unit, producer in columns])
        for row in rows:
            w.writerow([_fmt(row[key]) for key, _, _ in columns])
        path = self.root / name
        path.write_bytes(buf.getvalue().encode("utf-8"))
        self._register(path, "csv")
        return path

    def json(self, name: str, obj) -> Path:
        path = self.root / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_fmt) + "\n", encoding="utf-8")
        self._register(path, "json")
        return path

    def register(self, path, kind: str):
        self._register(Path(path), kind)


def _flow_config(cfg: RunConfig) -> FlowConfig:
    return FlowConfig(dt=cfg.flow_dt, t_end=cfg.flow_t_end, backoff=cfg.flow_backoff,
                      max_backoffs=cfg.flow_max_backoffs, grad_tol=cfg.flow_grad_tol, growth=cfg.flow_growth,
                      max_dt=cfg.flow_max_dt)


def _jump_samples(cfg: RunConfig, spec):
    if spec.jump is None:
        return None
    return spec.jump.sample(cfg.jump_samples, stage_seed(cfg.seed, "jump_samples"))


def _exact(cfg: RunConfig, spec, u0, box: Box):
    if spec.name == "heat":
        return heat_solution(u0, cfg.kappa, box, cfg.T)
    if spec.name == "black_scholes" and cfg.dim == 1:
        return bs_solution(cfg.sigma, cfg.rate, u0, box, cfg.T)
    return None


ERROR_COLUMNS = [("k", "step index", "reference.error_report"), ("t_k", "time", "reference.error_report"),
                 ("l2_error", "L2 norm", "reference.error_report"), ("h1_error", "H1 norm", "reference.error_report")]


def _solve_once(cfg: RunConfig, K: int, writer: Optional[OutputWriter], prefix: str = ""):
    spec = build_operator(cfg)
    u0 = build_initial(cfg)
    rule = build_rule(cfg, stage_seed(cfg.seed, "quadrature"))
    tcfg = TimeStepConfig(cfg.T, K, cfg.warm_start, _flow_config(cfg))
    checkpoint = None
    if writer is not None:
        ckpt_dir = writer.root / f"{prefix}checkpoints"
        ckpt_dir.mkdir(exist_ok=True)

        def checkpoint(k, net):
            path = net.save(ckpt_dir / f"U_{k:04d}")
            writer.register(path, "checkpoint")
            writer.register(path.with_suffix(".bin"), "checkpoint")
            return str(path.relative_to(writer.root))

    nets, records, traces = solve_pde(spec, u0, tcfg, rule, cfg.n, cfg.delta, cfg.clip_radius,
                                      stage_seed(cfg.seed, "network_init"), _jump_samples(cfg, spec),
                                      cfg.lambda2, checkpoint=checkpoint)
    exact = _exact(cfg, spec, u0, rule.box)
    report = None
    if exact is not None:
        report = error_report(nets, exact, rule, [r.t_k for r in records], u0=u0)
    return nets, records, traces, report


def run_solve(cfg: RunConfig, writer: OutputWriter) -> dict:
    nets, records, traces, report = _solve_once(cfg, cfg.K, writer)
    writer.json("steps.json", [r.as_dict() for r in records])
    violations = sum(t.monotonicity_violations for t in traces)
    summary = {"steps": len(records), "descent_violations": violations,
               "stop_reasons": [r.stop_reason for r in records]}
    if report is not None:
        writer.csv("errors.csv", ERROR_COLUMNS, report["rows"])
        summary.update(max_l2=report["max_l2"], max_h1=report["max_h1"])
    else:
        summary["errors"] = "no exact solution available for this operator"
    return summary


def run_flow(cfg: RunConfig, writer: OutputWriter) -> dict:
    spec = build_operator(cfg)
    u0 = build_initial(cfg)
    rule = build_rule(cfg, stage_seed(cfg.seed, "quadrature"))
    ctx = EnergyContext(u0, cfg.h, spec, rule, _jump_samples(cfg, spec), cfg.lambda2)
    net = init_params(cfg.n, cfg.delta, cfg.clip_radius, stage_seed(cfg.seed, "network_init"), cfg.dim)
    net, trace = train(ctx, net, _flow_config(cfg))
    rows = [{"step": s, "t": t, "loss": v, "grad_norm": g}
            for s, t, v, g in zip(trace.snapshot_ids, trace.times, trace.losses, trace.grad_norms)]
    op = "training.train"
    writer.csv("trace.csv", [("step", "count", op), ("t", "flow time", op), ("loss", "energy", op),
                             ("grad_norm", "Euclidean norm", op)], rows)
    path = net.save(writer.root / "U_0001")
    writer.register(path, "checkpoint")
    writer.register(path.with_suffix(".bin"), "checkpoint")
    return {"final_loss": trace.final_loss, "grad_norm": trace.final_grad_norm, "flow_steps": trace.steps,
            "rejected": trace.rejected, "stop_reason": trace.stop_reason,
            "descent_violations": trace.monotonicity_violations}


def _kernel_rule(cfg: RunConfig):
    return tensor_grid(Box.cube(cfg.kernel_half_width, cfg.dim), cfg.kernel_points)


def run_kernel(cfg: RunConfig, writer: OutputWriter) -> dict:
    rule = _kernel_rule(cfg)
    k = empirical_kernel(rule, cfg.kernel_samples, stage_seed(cfg.seed, "kernel"))
    g, d = k.grid.shape
    rows = []
    for a in range(g):
        for b in range(g):
            row = {"a": a, "b": b, "Z": k.Z[a, b], "Z_se": k.Z_se[a, b]}
            for j in range(d):
                row[f"x_a{j + 1}"] = k.grid[a, j]
                row[f"x_b{j + 1}"] = k.grid[b, j]
            rows.append(row)
    op = "widelimit.empirical_kernel"
    cols = [("a", "node index", op), ("b", "node index", op)]
    cols += [(f"x_a{j + 1}", "space", op) for j in range(d)] + [(f"x_b{j + 1}", "space", op) for j in range(d)]
    cols += [("Z", "kernel value", op), ("Z_se", "Monte Carlo standard error", op)]
    writer.csv("kernel.csv", cols, rows)
    ev = np.linalg.eigvalsh(k.Z)
    return {"grid_points": g, "samples": k.m, "symmetry_defect": k.symmetry_defect(),
            "min_eig": float(ev[0]), "max_eig": float(ev[-1])}


def run_spectra(cfg: RunConfig, writer: OutputWriter) -> dict:
    spec = build_operator(cfg)
    rule = _kernel_rule(cfg)
    ctx = EnergyContext(build_initial(cfg), cfg.h, spec, rule, _jump_samples(cfg, spec), cfg.lambda2)
    k = empirical_kernel(rule, cfg.kernel_samples, stage_seed(cfg.seed, "kernel"))
    T, G = build_Ttilde(k, ctx)
    w_star = grid_minimizer(ctx).values
    v0 = np.zeros_like(w_star)
    flow = spectral_flow(T, G, v0, w_star)
    op = "widelimit.spectral_flow"
    writer.csv("spectra.csv", [("i", "mode index", op), ("gamma", "1/flow time", op),
                               ("h0", "Htilde coefficient", op)], flow.dump_rows())
    times = sorted(set(cfg.t_probe))
    direct = direct_flow(T, G, v0, w_star, times)
    rows = []
    for t, v in zip(times, direct):
        diff = v - flow.trajectory(t)
        ref = math.sqrt(flow.norm_sq(t))
        rows.append({"t": t, "spectral_norm": ref, "direct_norm": math.sqrt(max(float((v - w_star) @ G @ (v - w_star)), 0.0)),
                     "relative_gap": math.sqrt(max(float(diff @ G @ diff), 0.0)) / ref if ref > 0 else 0.0})
    writer.csv("decay.csv", [("t", "flow time", "widelimit.spectral_flow"),
                             ("spectral_norm", "Htilde norm", "widelimit.spectral_flow"),
                             ("direct_norm", "Htilde norm", "widelimit.direct_flow"),
                             ("relative_gap", "ratio", "widelimit.direct_flow")], rows)
    return {"gamma_max": float(flow.eigvals[0]), "gamma_min": float(flow.eigvals[-1]),
            "max_relative_gap": max(r["relative_gap"] for r in rows)}


def _slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def run_converge(cfg: RunConfig, writer: OutputWriter) -> dict:
    if cfg.sweep == "K":
        rows = []
        for K in cfg.K_list:
            _, _, _, report = _solve_once(cfg, K, None)
            if report is None:
                raise ConfigError(f"problem: no exact solution for {cfg.problem}; K sweep needs heat or black_scholes")
            rows.append({"K": K, "h": cfg.T / K, "max_l2": report["max_l2"], "max_h1": report["max_h1"]})
        fitted = _slope([r["h"] for r in rows], [r["max_l2"] for r in rows]) if len(rows) > 1 else float("nan")
        for i, r in enumerate(rows):
            prev = rows[i - 1] if i else None
            r["observed_order"] = (math.log(prev["max_l2"] / r["max_l2"]) / math.log(prev["h"] / r["h"])
                                   if prev else float("nan"))
            r["fitted_rate"] = fitted
        op = "reference.error_report"
        writer.csv("converge.csv", [("K", "steps", "training.solve_pde"), ("h", "time", "training.solve_pde"),
                                    ("max_l2", "L2 norm", op), ("max_h1", "H1 norm", op),
                                    ("observed_order", "log ratio", "harness.converge"),
                                    ("fitted_rate", "log-log slope", "harness.converge")], rows)
        return {"fitted_rate": fitted}
    spec = build_operator(cfg)
    box = Box.cube(cfg.kernel_half_width, cfg.dim)
    rule = build_rule(cfg, stage_seed(cfg.seed, "quadrature"), box)
    if rule.axes is None:
        raise ConfigError("quad_kind: the width sweep needs a grid rule")
    ctx = EnergyContext(build_initial(cfg), cfg.h, spec, rule, _jump_samples(cfg, spec), cfg.lambda2)
    setup = limit_setup(ctx, cfg.kernel_samples, stage_seed(cfg.seed, "kernel"))
    rows, summary = compare_wide_limit(setup, cfg.n_list, cfg.t_probe, cfg.trials, stage_seed(cfg.seed, "trials"),
                                       cfg.delta, cfg.limit_dt)
    op = "widelimit.compare_wide_limit"
    writer.csv("wide_limit.csv", [("n", "width", op), ("t", "flow time", op), ("mean_error", "H1 grid norm", op),
                                  ("std_error", "H1 grid norm", op)], rows)
    fitted = _slope([s["n"] for s in summary], [s["sup_mean_error"] for s in summary]) if len(summary) > 1 \
        else float("nan")
    for s in summary:
        s["fitted_slope"] = fitted
    writer.csv("wide_limit_sup.csv", [("n", "width", op), ("sup_mean_error", "H1 grid norm", op),
                                      ("std_error", "H1 grid norm", op), ("t_at_sup", "flow time", op),
                                      ("fitted_slope", "log-log slope", "harness.converge")], summary)
    decreasing = all(b["sup_mean_error"] < a["sup_mean_error"] for a, b in zip(summary, summary[1:]))
    return {"fitted_slope": fitted, "strictly_decreasing": decreasing}


def run_check_assumptions(cfg: RunConfig, writer: OutputWriter) -> dict:
    spec = build_operator(cfg)
    rule = build_rule(cfg, stage_seed(cfg.seed, "quadrature"))
    base = stage_seed(cfg.seed, "assumption_trials")
    trials = [init_params(cfg.n, cfg.delta, cfg.clip_radius, base + i, cfg.dim) for i in range(cfg.assumption_trials)]
    samples = _jump_samples(cfg, spec)
    est = estimate_constants(spec, trials, rule, samples)
    ref = closed_form_constants(spec)
    op = "operators.estimate_constants"
    rows = [
        {"quantity": "M", "value": est.M, "reference": ref.M if ref else float("nan"),
         "holds": est.M <= ref.M + 1e-3 if ref else True},
        {"quantity": "lambda1", "value": est.lambda1, "reference": ref.lambda1 if ref else float("nan"),
         "holds": True},
        {"quantity": "lambda2", "value": est.lambda2, "reference": ref.lambda2 if ref else float("nan"),
         "holds": True},
    ]
    if est.M_F is not None:
        rows.append({"quantity": "M_F", "value": est.M_F, "reference": ref.M_F if ref and ref.M_F is not None
                     else float("nan"), "holds": True})
    if spec.jump is not None:
        ratios = merton_jump_ratio(spec, trials, rule, samples)
        bound = merton_jump_bound(spec.jump.lam)
        rows.append({"quantity": "jump_ratio_max", "value": float(ratios.max()), "reference": bound,
                     "holds": bool(np.all(ratios <= bound))})
    writer.csv("assumptions.csv", [("quantity", "name", op), ("value", "dimensionless", op),
                                   ("reference", "closed form", "operators.closed_form_constants"),
                                   ("holds", "bool", "harness.check_assumptions")], rows)
    writer.json("assumptions.json", {"estimated": {"M": est.M, "lambda1": est.lambda1, "lambda2": est.lambda2,
                                                   "M_F": est.M_F, "source": est.source, "details": est.details},
                                     "reference": None if ref is None else {
                                         "M": ref.M, "lambda1": ref.lambda1, "lambda2": ref.lambda2,
                                         "source": ref.source}})
    return {"all_hold": all(r["holds"] for r in rows)}


RUNNERS = {
    "solve": run_solve,
    "flow": run_flow,
    "kernel": run_kernel,
    "spectra": run_spectra,
    "converge": run_converge,
    "check-assumptions": run_check_assumptions,
}


def manifest(cfg: RunConfig, subcommand: str, writer: OutputWriter, summary: dict, status: str) -> dict:
    return {
        "subcommand": subcommand,
        "status": status,
        "config": cfg.to_dict(),
        "derived": derived(cfg),
        "seeds": {stage: stage_seed(cfg.seed, stage) for stage in
                  ("network_init", "quadrature", "jump_samples", "kernel", "trials", "assumption_trials")},
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": list(writer.index),
        "summary": summary,
    }


def run(subcommand: str, cfg: RunConfig, out_dir=None) -> int:
    """Execute one subcommand; returns the process exit status."""
    if subcommand not in RUNNERS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    writer = OutputWriter(out_dir if out_dir is not None else cfg.out)
    try:
        summary = RUNNERS[subcommand](cfg, writer)
        status, code = "ok", EXIT_OK
    except NUMERICAL_ERRORS as exc:
        summary, status, code = {"error": type(exc).__name__, "message": str(exc)}, "numerical-failure", EXIT_NUMERIC
    except (ConfigError, StepSizeError, ValueError) as exc:
        summary, status, code = {"error": type(exc).__name__, "message": str(exc)}, "config-error", EXIT_CONFIG
    if code != EXIT_OK:
        writer.json("error.json", summary)
        log.error("%s failed: %s", subcommand, summary["message"])
    path = writer.root / "manifest.json"
    path.write_text(json.dumps(manifest(cfg, subcommand, writer, summary, status), indent=2, sort_keys=True,
                               default=_fmt) + "\n", encoding="utf-8")
    return code
