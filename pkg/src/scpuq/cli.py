"""Command-line front end.

Exit codes: 0 success, 1 solver failure, 2 unreadable input, 3 invalid input.
"""

from __future__ import annotations

import argparse
import fnmatch
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .models.files import ModelParseError, ModelValidationError, bundled_model_path, load_model
from .models.gas import GasMarketModel, build_gas_market
from .models.oligopoly import OligopolyConfig, cost_ladder, cost_ladder_covariance, make_oligopoly
from .montecarlo import SamplingError, SamplingPlan, mc_covariance, mc_sample_count, race
from .ncp import InfeasiblePointError, check_solution, classify_activity
from .reports import (COMPARISON_SCHEMA, DIAGNOSTICS_SCHEMA, SOLUTION_SCHEMA, ReportError, read_covariance,
                      write_json, write_matrix_csv, write_table_csv)
from .solver import SolverConfig, solve
from .uq import (CovarianceModel, NotPSDError, PreconditionError, build_linear_response, diagnostics,
                 diagonal_cv, propagate_covariance, relative_sensitivity, sensitivity, tornado,
                 with_correlation)

EXIT_OK, EXIT_SOLVER, EXIT_PARSE, EXIT_VALIDATION = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


@dataclass
class RunConfig:
    command: str
    model: Optional[str]
    out: Path
    cov: Optional[str] = None
    cv: Optional[float] = None
    wiener: bool = False
    params: Optional[str] = None
    corr: tuple = ()
    seed: int = 0
    tau: Optional[float] = None
    tol: float = 1e-8
    samples: Optional[int] = None
    runs: int = 5
    sizes: str = "5,10,15,20"
    budget: float = 60.0

    @classmethod
    def from_args(cls, a) -> "RunConfig":
        cfg = cls(command=a.command, model=getattr(a, "model", None), out=Path(a.out),
                  cov=getattr(a, "cov", None), cv=getattr(a, "cv", None), wiener=getattr(a, "wiener", False),
                  params=getattr(a, "params", None), corr=tuple(getattr(a, "corr", None) or ()),
                  seed=a.seed, tau=a.tau, tol=a.tol, samples=getattr(a, "samples", None),
                  runs=getattr(a, "runs", 5), sizes=getattr(a, "sizes", "5,10,15,20"),
                  budget=getattr(a, "budget", 60.0))
        cfg.validate()
        return cfg

    def validate(self):
        if self.command in ("propagate", "mc-compare"):
            if (self.cov is None) == (self.cv is None):
                raise CliError("give exactly one covariance source: --cov FILE or --cv PERCENT", EXIT_VALIDATION)
        if (self.wiener or self.params or self.corr) and self.cv is None:
            raise CliError("--wiener, --params and --corr modify --cv and need it", EXIT_VALIDATION)
        if self.cv is not None and self.cv < 0:
            raise CliError("--cv must be nonnegative", EXIT_VALIDATION)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            probe = self.out / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise CliError(f"output directory {self.out} is not writable: {exc}", EXIT_VALIDATION) from None


@dataclass
class Loaded:
    name: str
    problem: object
    gas: Optional[object] = None
    compute_time: float = 0.0  # solve, classification and response; excludes file output


def _model_path(spec: str) -> Path:
    p = Path(spec)
    if p.exists():
        return p
    bundled = bundled_model_path(spec if spec.endswith(".json") else spec + ".json")
    return bundled if bundled.exists() else p


def load(spec: str) -> Loaded:
    path = _model_path(spec)
    try:
        model = load_model(path)
    except ModelParseError as exc:
        raise CliError(str(exc), EXIT_PARSE) from None
    except ModelValidationError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from None
    if isinstance(model, OligopolyConfig):
        return Loaded(path.stem, make_oligopoly(model))
    gs = build_gas_market(model)
    return Loaded(path.stem, gs.problem, gs)


def _match(labels, patterns: Optional[str]) -> np.ndarray:
    if not patterns:
        return np.ones(len(labels), dtype=bool)
    pats = [p.strip() for p in patterns.split(",") if p.strip()]
    mask = np.array([any(fnmatch.fnmatchcase(lab, p) for p in pats) for lab in labels])
    if not mask.any():
        raise CliError(f"--params {patterns!r} matches no parameter", EXIT_VALIDATION)
    return mask


def build_covariance(cfg: RunConfig, m: Loaded) -> CovarianceModel:
    labels = list(m.problem.param_labels)
    if cfg.cov is not None:
        try:
            return read_covariance(cfg.cov, labels)
        except FileNotFoundError:
            raise CliError(f"{cfg.cov}: no such file", EXIT_PARSE) from None
        except NotPSDError as exc:
            raise CliError(f"{cfg.cov}: {exc}", EXIT_VALIDATION) from None
        except ReportError as exc:
            raise CliError(str(exc), EXIT_VALIDATION) from None
    cv = cfg.cv / 100.0
    mask = _match(labels, cfg.params)
    if cfg.wiener:
        if m.gas is None:
            raise CliError("--wiener needs a multi-year gas model", EXIT_VALIDATION)
        fams = sorted({lab.split("[")[0] for lab, k in zip(labels, mask) if k})
        cov = m.gas.wiener_covariance(cv, fams)
    else:
        theta = np.where(mask, m.problem.theta_mean, 0.0)
        cov = diagonal_cv(theta, cv, labels)
    for spec in cfg.corr:
        try:
            a, b, rho = spec.split(",")
            i, j, rho = labels.index(a), labels.index(b), float(rho)
        except ValueError:
            raise CliError(f"--corr expects LABEL,LABEL,RHO with known labels, got {spec!r}", EXIT_VALIDATION) from None
        if not -1.0 <= rho <= 1.0:
            raise CliError(f"--corr: correlation {rho} outside [-1, 1]", EXIT_VALIDATION)
        cov = with_correlation(cov, i, j, rho)
    try:
        return cov.validate()
    except NotPSDError as exc:
        raise CliError(str(exc), EXIT_VALIDATION) from None


def _solve(cfg: RunConfig, m: Loaded):
    p = m.problem
    t0 = time.perf_counter()
    rep = solve(p, cfg=SolverConfig())
    try:
        sol = classify_activity(p, rep.x_star, tau=cfg.tau)
        activity = list(sol.activity)
    except InfeasiblePointError:
        sol, activity = None, ["violated"] * p.n
    m.compute_time += time.perf_counter() - t0
    chk = check_solution(p, rep.x_star, tol=cfg.tol)
    F = p.F(rep.x_star)
    report = {
        "model": m.name,
        "converged": bool(rep.converged),
        "iterations": int(rep.iterations),
        "merit": float(rep.merit),
        "message": rep.message,
        "labels": list(p.var_labels),
        "x": rep.x_star,
        "F": F,
        "activity": activity,
        "check": chk.as_dict(),
    }
    if m.gas is not None:
        report["market"] = m.gas.residuals(rep.x_star)
    write_json(cfg.out / "solution.json", report, SOLUTION_SCHEMA)
    write_table_csv(cfg.out / "solution.csv", ["label", "x", "F", "activity"],
                    [(lab, float(x), float(f), a) for lab, x, f, a in zip(p.var_labels, rep.x_star, F, activity)])
    residual_rows = [(k, float(v)) for k, v in chk.as_dict().items() if k != "ok"]
    if m.gas is not None:
        residual_rows += [(k, float(v)) for k, v in report["market"].items()]
    write_table_csv(cfg.out / "residuals.csv", ["residual", "value"], residual_rows)
    if not (rep.converged and chk.ok) or sol is None:
        raise CliError(f"solver failed: {rep.message}; residuals {chk.as_dict()} (report kept in {cfg.out})",
                       EXIT_SOLVER)
    return rep, sol


def _response(cfg, m):
    rep, sol = _solve(cfg, m)
    t0 = time.perf_counter()
    try:
        lr = build_linear_response(m.problem, sol)
    except PreconditionError as exc:
        raise CliError(str(exc), EXIT_SOLVER) from None
    m.compute_time += time.perf_counter() - t0
    return rep, sol, lr


def _write_sensitivity(cfg, m, lr):
    p = m.problem
    S = sensitivity(lr)
    rel = dict(zip(p.param_labels, relative_sensitivity(lr, p.theta_mean)))
    write_table_csv(cfg.out / "sensitivity.csv", ["parameter", "S", "relative_1pct"],
                    [(lab, v, float(rel[lab])) for lab, v in tornado(S, p.param_labels)])


def cmd_solve(cfg: RunConfig) -> int:
    m = load(cfg.model)
    rep, _ = _solve(cfg, m)
    print(f"{m.name}: converged in {rep.iterations} iterations, merit {rep.merit:.3g}")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig) -> int:
    m = load(cfg.model)
    _, _, lr = _response(cfg, m)
    _write_sensitivity(cfg, m, lr)
    top = tornado(sensitivity(lr), m.problem.param_labels)[0]
    print(f"{m.name}: most influential parameter {top[0]} (S = {top[1]:.4g})")
    return EXIT_OK


def cmd_propagate(cfg: RunConfig) -> int:
    m = load(cfg.model)
    cov = build_covariance(cfg, m)
    _, _, lr = _response(cfg, m)
    res = propagate_covariance(lr, cov)
    p = m.problem
    write_matrix_csv(cfg.out / "T.csv", lr.T, p.var_labels, p.param_labels)
    write_matrix_csv(cfg.out / "Cstar.csv", res.C_star, p.var_labels, p.var_labels)
    _write_sensitivity(cfg, m, lr)
    diag = diagnostics(lr)
    diag["zero_set_labels"] = [p.var_labels[i] for i in diag["zero_set"]]
    diag["trace"] = float(np.trace(res.C_star))
    write_json(cfg.out / "diagnostics.json", diag, DIAGNOSTICS_SCHEMA)
    if diag["ill_conditioned"]:
        print(f"warning: kappa_H = {diag['kappa_H']:.3g}, linear response is ill-conditioned", file=sys.stderr)
    print(f"{m.name}: trace(C*) = {diag['trace']:.6g}")
    return EXIT_OK


def cmd_mc_compare(cfg: RunConfig) -> int:
    m = load(cfg.model)
    cov = build_covariance(cfg, m)
    rep, _, lr = _response(cfg, m)
    t0 = time.perf_counter()
    res = propagate_covariance(lr, cov)
    t_approx = m.compute_time + time.perf_counter() - t0
    approx = float(np.trace(res.C_star))
    N = cfg.samples if cfg.samples is not None else mc_sample_count(m.problem.n)
    try:
        mc = mc_covariance(m.problem, m.problem.theta_mean, cov, SamplingPlan(N, seed=cfg.seed),
                           runs=cfg.runs, x_bar=rep.x_star)
    except SamplingError as exc:
        raise CliError(str(exc), EXIT_SOLVER) from None
    lo, hi = min(mc.traces), max(mc.traces)
    report = {
        "model": m.name,
        "approx_trace": approx,
        "mc_traces": mc.traces,
        "band": [lo, hi],
        "inside_band": bool(lo <= approx <= hi),
        "relative_gap": abs(approx - float(np.mean(mc.traces))) / max(abs(approx), np.finfo(float).tiny),
        "samples": int(N),
        "runs": int(cfg.runs),
        "seed": int(cfg.seed),
        "failures": int(mc.failures),
        "unreliable": bool(mc.unreliable),
    }
    write_json(cfg.out / "comparison.json", report, COMPARISON_SCHEMA)
    write_table_csv(cfg.out / "mc_traces.csv", ["run", "trace"], [(i, t) for i, t in enumerate(mc.traces)])
    write_matrix_csv(cfg.out / "mc_cov.csv", mc.cov, m.problem.var_labels, m.problem.var_labels)
    write_table_csv(cfg.out / "timing.csv", ["method", "wall_time_s", "solves"],
                    [("approximation", t_approx, 1), ("monte-carlo", mc.wall_time, mc.solve_count)])
    flag = "inside" if report["inside_band"] else "OUTSIDE"
    print(f"{m.name}: approximation {approx:.6g} {flag} MC band [{lo:.6g}, {hi:.6g}]")
    return EXIT_OK


def cmd_race(cfg: RunConfig) -> int:
    try:
        sizes = [int(s) for s in cfg.sizes.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"--sizes expects comma-separated integers, got {cfg.sizes!r}", EXIT_VALIDATION) from None

    def make(n):
        return make_oligopoly(cost_ladder(n)), cost_ladder_covariance(n)

    rows = race(make, sizes, budget=cfg.budget, seed=cfg.seed)
    header = ["n", "approx_time", "approx_trace", "mc_samples", "mc_time", "mc_trace", "extrapolated"]
    write_table_csv(cfg.out / "race.csv", header,
                    [[r.n, r.approx_time, r.approx_trace, r.mc_samples, r.mc_time,
                      "" if r.mc_trace is None else r.mc_trace, str(r.extrapolated).lower()] for r in rows])
    for r in rows:
        tag = " (extrapolated)" if r.extrapolated else ""
        print(f"n={r.n}: approx {r.approx_time:.3g}s, MC {r.mc_samples} solves {r.mc_time:.3g}s{tag}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "propagate": cmd_propagate, "sensitivity": cmd_sensitivity,
            "mc-compare": cmd_mc_compare, "race": cmd_race}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scpuq", description="First-order uncertainty propagation for complementarity models.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        if model:
            sp.add_argument("--model", required=True, help="model JSON file or bundled model name (e.g. duopoly)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--tau", type=float, default=None, help="activity classification threshold")
        sp.add_argument("--tol", type=float, default=1e-8, help="solution residual tolerance")

    def covariance(sp):
        sp.add_argument("--cov", help="covariance file (.json or labelled .csv)")
        sp.add_argument("--cv", type=float, help="coefficient of variation in percent")
        sp.add_argument("--params", help="comma-separated label patterns that receive --cv (default: all)")
        sp.add_argument("--wiener", action="store_true", help="Brownian covariance across years (gas models)")
        sp.add_argument("--corr", action="append", metavar="A,B,RHO", help="add a correlation between two parameters")

    for name in ("solve", "sensitivity"):
        common(sub.add_parser(name))
    sp = sub.add_parser("propagate")
    common(sp)
    covariance(sp)
    sp = sub.add_parser("mc-compare")
    common(sp)
    covariance(sp)
    sp.add_argument("--samples", type=int, help="samples per run (default max(100, 0.1*2^n))")
    sp.add_argument("--runs", type=int, default=5)
    sp = sub.add_parser("race")
    common(sp, model=False)
    sp.add_argument("--sizes", default="5,10,15,20")
    sp.add_argument("--budget", type=float, default=60.0, help="seconds allowed per Monte-Carlo run")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_args(args)
        return COMMANDS[cfg.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
