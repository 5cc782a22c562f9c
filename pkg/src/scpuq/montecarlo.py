"""Monte-Carlo reference for the solution covariance.

Parameters are drawn from N(θ̄, C) with a balanced two-strata design per
dimension (antithetic pairs), every draw is re-solved warm-started from the
mean solution, and the sample covariance of the solutions is reported.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .ncp import ParametrizedNCP, classify_activity
from .solver import SolverConfig, solve, solve_many
from .uq import CovarianceModel, build_linear_response, propagate_covariance, trace_uncertainty

SCHEMES = ("balanced-stratified", "plain")
FAILURE_LIMIT = 0.05


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingPlan:
    n_samples: int
    strata_per_dim: int = 2
    scheme: str = "balanced-stratified"
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least two samples")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.scheme == "balanced-stratified" and self.strata_per_dim != 2:
            raise ValueError("the balanced design splits each dimension into exactly two strata")


def mc_sample_count(n: int) -> int:
    """max(100, 0.1·2ⁿ), rounded up."""
    return max(100, math.ceil(0.1 * 2 ** n))


def standard_draws(m: int, plan: SamplingPlan, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Standard-normal design matrix of shape (n_samples, m).

    The balanced scheme emits antithetic pairs (z, -z) back to back, so each
    dimension has equally many draws in its negative and positive half (off
    by one for odd sample counts).
    """
    rng = np.random.default_rng(plan.seed) if rng is None else rng
    N = plan.n_samples
    if plan.scheme == "plain":
        return rng.standard_normal((N, m))
    half = N // 2
    z = rng.standard_normal((half, m))
    Z = np.empty((N, m))
    Z[0:2 * half:2] = z
    Z[1:2 * half:2] = -z
    if N % 2:
        Z[-1] = rng.standard_normal(m)
    return Z


def stratum_counts(Z) -> np.ndarray:
    """Per-dimension (negative, positive) draw counts."""
    Z = np.asarray(Z)
    return np.stack([(Z < 0).sum(axis=0), (Z >= 0).sum(axis=0)], axis=1)


def covariance_factor(C) -> np.ndarray:
    """Lower factor ``Lf`` with ``Lf Lfᵀ = C`` for a PSD, possibly singular, C.

    Zero-variance dimensions are left out of the factorisation; if the rest
    is numerically singular a growing diagonal jitter is tried before giving up.
    """
    C = np.asarray(C.C if isinstance(C, CovarianceModel) else C, dtype=float)
    m = C.shape[0]
    Lf = np.zeros((m, m))
    keep = np.flatnonzero(np.diag(C) > 0)
    if keep.size == 0:
        return Lf
    sub = C[np.ix_(keep, keep)]
    scale = float(np.trace(sub)) / keep.size
    for jitter in [0.0] + [scale * 10.0 ** k for k in range(-15, -7)]:
        try:
            Ls = np.linalg.cholesky(sub + jitter * np.eye(keep.size))
        except np.linalg.LinAlgError:
            continue
        Lf[np.ix_(keep, keep)] = Ls
        return Lf
    raise SamplingError("covariance could not be factorised even with diagonal jitter")


def sample_parameters(C, theta_mean, plan: SamplingPlan, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    theta_mean = np.asarray(theta_mean, dtype=float)
    Lf = covariance_factor(C)
    Z = standard_draws(theta_mean.size, plan, rng)
    return theta_mean + Z @ Lf.T


@dataclass
class McReport:
    mean: np.ndarray
    cov: np.ndarray
    traces: list
    wall_time: float
    solve_count: int
    failures: int
    unreliable: bool
    run_covs: list = field(default_factory=list)
    trace_ses: list = field(default_factory=list)
    samples: Optional[np.ndarray] = None
    solutions: Optional[np.ndarray] = None

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov))


def trace_standard_error(X, paired: bool) -> float:
    """Standard error of the sample-covariance trace.

    Uses the per-sample squared deviations; antithetic partners are averaged
    first because they are strongly dependent.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    d = np.sum((X - X.mean(axis=0)) ** 2, axis=1) * N / (N - 1)
    if paired and N >= 4:
        half = N // 2
        d = 0.5 * (d[0:2 * half:2] + d[1:2 * half:2])
    return float(np.std(d, ddof=1) / np.sqrt(d.size))


def mc_covariance(problem: ParametrizedNCP, theta_mean, C, plan: SamplingPlan,
                  cfg: SolverConfig = SolverConfig(), runs: int = 1, x_bar=None,
                  keep_samples: bool = False) -> McReport:
    """Empirical covariance of the NCP solution over sampled parameters.

    ``runs`` independent repetitions use seeds spawned from ``plan.seed``;
    the reported covariance averages the per-run estimates. Failed solves
    are dropped and counted; above 5% failures the report is flagged.
    """
    t0 = time.perf_counter()
    theta_mean = np.asarray(theta_mean, dtype=float)
    if x_bar is None:
        base = solve(problem, theta_mean, cfg)
        if not base.converged:
            raise SamplingError(f"solver did not converge at the mean parameters ({base.message})")
        x_bar = base.x_star
    Lf = covariance_factor(C)
    seeds = np.random.SeedSequence(plan.seed).spawn(runs)
    covs, traces, means, ses = [], [], [], []
    failures = 0
    count = 0
    last_T = last_X = None
    for ss in seeds:
        Z = standard_draws(theta_mean.size, plan, np.random.default_rng(ss))
        Th = theta_mean + Z @ Lf.T
        res = solve_many(problem, Th, x_bar, cfg)
        count += Th.shape[0]
        failures += int((~res.converged).sum())
        X = res.X[res.converged]
        if X.shape[0] < 2:
            raise SamplingError("fewer than two successful solves")
        cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
        covs.append(0.5 * (cov + cov.T))
        traces.append(float(np.trace(cov)))
        ses.append(trace_standard_error(X, plan.scheme == "balanced-stratified" and res.converged.all()))
        means.append(X.mean(axis=0))
        last_T, last_X = Th, res.X
    return McReport(
        mean=np.mean(means, axis=0),
        cov=np.mean(covs, axis=0),
        traces=traces,
        wall_time=time.perf_counter() - t0,
        solve_count=count,
        failures=failures,
        unreliable=failures > FAILURE_LIMIT * count,
        run_covs=covs,
        trace_ses=ses,
        samples=last_T if keep_samples else None,
        solutions=last_X if keep_samples else None,
    )


@dataclass
class RaceRow:
    n: int
    approx_time: float
    approx_trace: float
    mc_samples: int
    mc_time: float
    mc_trace: Optional[float]
    extrapolated: bool

    def as_dict(self) -> dict:
        return self.__dict__.copy()


def race(make: Callable[[int], tuple], sizes: Iterable[int], budget: float = 60.0,
         cfg: SolverConfig = SolverConfig(), seed: int = 0, pilot: int = 200,
         sample_count: Callable[[int], int] = mc_sample_count) -> list:
    """Time the first-order approximation against a full Monte-Carlo run.

    ``make(n)`` returns ``(problem, covariance)`` for size ``n``. Monte-Carlo
    runs projected to exceed ``budget`` seconds are not executed: their time
    is extrapolated from a pilot batch and the row is flagged.
    """
    rows = []
    for n in sizes:
        problem, C = make(n)
        base = solve(problem, cfg=cfg)
        if not base.converged:
            raise SamplingError(f"size {n}: solver did not converge at the mean")
        t0 = time.perf_counter()
        sol = classify_activity(problem, base.x_star)
        lr = build_linear_response(problem, sol)
        res = propagate_covariance(lr, C)
        t_approx = time.perf_counter() - t0
        N = sample_count(n)
        probe = SamplingPlan(min(N, pilot), seed=seed)
        t0 = time.perf_counter()
        mc_covariance(problem, problem.theta_mean, C, probe, cfg, x_bar=base.x_star)
        per_solve = (time.perf_counter() - t0) / probe.n_samples
        if N * per_solve > budget:
            rows.append(RaceRow(n, t_approx, trace_uncertainty(res.C_star), N, N * per_solve, None, True))
            continue
        rep = mc_covariance(problem, problem.theta_mean, C, SamplingPlan(N, seed=seed), cfg, x_bar=base.x_star)
        rows.append(RaceRow(n, t_approx, trace_uncertainty(res.C_star), N, rep.wall_time, rep.trace, False))
    return rows
