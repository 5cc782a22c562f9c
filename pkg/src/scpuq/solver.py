"""Semismooth Newton solver for small and medium NCPs.

Minimises the Fischer-Burmeister merit ``½‖Φ_FB(x)‖²`` with Armijo
backtracking, falling back to Tikhonov-regularised Gauss-Newton steps
when the generalized Jacobian is (numerically) singular.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .ncp import FB, ParametrizedNCP

log = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    """F produced non-finite values at a point the solver had to accept."""


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    residual_tol: float = 1e-20
    linesearch: str = "armijo"
    c1: float = 1e-4
    regularization: float = 1e-8
    x0: Optional[np.ndarray] = None
    polish_steps: int = 2
    max_backtracks: int = 50
    cond_limit: float = 1e13

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if not 0 < self.c1 < 1:
            raise ValueError("Armijo constant must lie in (0, 1)")
        if self.linesearch != "armijo":
            raise ValueError(f"unsupported line search {self.linesearch!r}")


@dataclass
class SolveReport:
    x_star: np.ndarray
    iterations: int
    merit: float
    converged: bool
    message: str = ""
    merit_history: list = field(default_factory=list)
    regularized_steps: int = 0


def fb_system(problem: ParametrizedNCP, x, theta):
    """Fischer-Burmeister residual and one element of its generalized Jacobian."""
    F = problem.F(x, theta)
    G = problem.G(x, theta)
    mask = problem.cone.mask
    phi = F.copy()
    J = G.copy()
    xm, Fm = x[mask], F[mask]
    phi[mask] = FB.psi(xm, Fm)
    da, db = FB.derivatives(xm, Fm)
    J[mask] = db[:, None] * G[mask]
    idx = np.flatnonzero(mask)
    J[idx, idx] += da
    return phi, J


def _fb_residual(problem, x, theta):
    F = problem.F(x, theta)
    mask = problem.cone.mask
    phi = F.copy()
    phi[mask] = FB.psi(x[mask], F[mask])
    return phi


def _merit(problem, x, theta) -> float:
    with np.errstate(all="ignore"):
        phi = _fb_residual(problem, x, theta)
    if not np.all(np.isfinite(phi)):
        return np.inf
    return 0.5 * float(phi @ phi)


def default_start(problem: ParametrizedNCP, theta) -> np.ndarray:
    """Problem-supplied start if any, else the zero of F linearised at the origin, projected onto the cone."""
    if problem.x0 is not None:
        return problem.x0.copy()
    z = np.zeros(problem.n)
    try:
        with np.errstate(all="ignore"):
            F0 = problem.F(z, theta)
            G0 = problem.G(z, theta)
            x0 = np.linalg.lstsq(G0, -F0, rcond=None)[0]
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return np.ones(problem.n)
    if not np.all(np.isfinite(x0)):
        return np.ones(problem.n)
    mask = problem.cone.mask
    x0[mask] = np.maximum(x0[mask], 0.0)
    return x0


def _regularized_direction(J, phi, lam0):
    H = J.T @ J
    g = J.T @ phi
    lam = max(lam0 * np.max(np.abs(H).sum(axis=1), initial=0.0), np.finfo(float).tiny)
    for _ in range(200):
        try:
            d = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            if np.all(np.isfinite(d)):
                yield d, lam
        except np.linalg.LinAlgError:
            pass
        lam *= 2.0


def _newton_direction(J, phi, cond_limit):
    try:
        if np.linalg.cond(J) > cond_limit:
            return None
        d = np.linalg.solve(J, -phi)
    except np.linalg.LinAlgError:
        return None
    return d if np.all(np.isfinite(d)) else None


def _armijo(problem, theta, x, d, f, slope, cfg):
    t = 1.0
    for _ in range(cfg.max_backtracks):
        x_new = x + t * d
        f_new = _merit(problem, x_new, theta)
        if f_new <= f + cfg.c1 * t * slope:
            return x_new, f_new
        t *= 0.5
    return None


def _run(problem: ParametrizedNCP, theta, x0, cfg: SolverConfig) -> SolveReport:
    x = np.array(x0, dtype=float)
    with np.errstate(all="ignore"):
        phi, J = fb_system(problem, x, theta)
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(J))):
        raise EvaluationError("F or its Jacobian is not finite at the starting point")
    f = 0.5 * float(phi @ phi)
    history = [f]
    reg_steps = 0
    polished = 0
    it = 0
    converged = f <= cfg.residual_tol
    message = "converged" if converged else ""
    while it < cfg.max_iter:
        if converged and polished >= cfg.polish_steps:
            break
        it += 1
        slope_dir = J.T @ phi
        step = None
        d = _newton_direction(J, phi, cfg.cond_limit)
        if d is not None and float(slope_dir @ d) < 0:
            step = _armijo(problem, theta, x, d, f, float(slope_dir @ d), cfg)
        if step is None and not converged:
            for d, lam in _regularized_direction(J, phi, cfg.regularization):
                slope = float(slope_dir @ d)
                if slope >= 0:
                    continue
                step = _armijo(problem, theta, x, d, f, slope, cfg)
                if step is not None:
                    reg_steps += 1
                    break
        if step is None:
            if converged:
                break
            message = "line search failed"
            break
        x_new, f_new = step
        if converged:
            polished += 1
            if not f_new < f:
                break
        x, f = x_new, f_new
        history.append(f)
        phi, J = fb_system(problem, x, theta)
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(J))):
            raise EvaluationError("F or its Jacobian became non-finite at an accepted iterate")
        if not converged and f <= cfg.residual_tol:
            converged = True
            message = "converged"
    if not converged and not message:
        message = "iteration limit reached"
    return SolveReport(x, it, f, converged, message, history, reg_steps)


def solve(problem: ParametrizedNCP, theta=None, cfg: SolverConfig = SolverConfig()) -> SolveReport:
    """Solve the NCP at parameters ``theta`` (default: the mean parameters).

    A report with ``converged=False`` is returned when the method stalls;
    the solver never claims convergence above ``cfg.residual_tol``.
    """
    theta = problem._theta(theta)
    if cfg.x0 is not None:
        return _run(problem, theta, problem._x(cfg.x0), cfg)
    rep = _run(problem, theta, default_start(problem, theta), cfg)
    if not rep.converged:
        log.debug("retrying from the all-ones start (%s)", rep.message)
        retry = _run(problem, theta, np.ones(problem.n), cfg)
        if retry.converged or retry.merit < rep.merit:
            return retry
    return rep


def solve_perturbed(problem: ParametrizedNCP, theta, warm_start, cfg: SolverConfig = SolverConfig()) -> SolveReport:
    """Re-solve at perturbed parameters starting from a nearby solution."""
    return _run(problem, problem._theta(theta), problem._x(warm_start), cfg)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SCPUQ_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class BatchResult:
    X: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    merit: np.ndarray


def _batch_system(problem, X, Th):
    F = problem.F_batch(X, Th)
    G = problem.G_batch(X, Th)
    mask = problem.cone.mask
    phi = F.copy()
    xm, Fm = X[:, mask], F[:, mask]
    phi[:, mask] = FB.psi(xm, Fm)
    da, db = FB.derivatives(xm, Fm)
    J = G.copy()
    J[:, mask, :] = db[:, :, None] * G[:, mask, :]
    idx = np.flatnonzero(mask)
    J[:, idx, idx] += da
    return phi, J


def _batch_merit(problem, X, Th):
    with np.errstate(all="ignore"):
        F = problem.F_batch(X, Th)
        mask = problem.cone.mask
        phi = F.copy()
        phi[:, mask] = FB.psi(X[:, mask], F[:, mask])
        f = 0.5 * np.einsum("ij,ij->i", phi, phi)
    return np.where(np.isfinite(f), f, np.inf)


def _solve_chunk(problem, Th, X0, cfg):
    N = Th.shape[0]
    X = X0.copy()
    iters = np.zeros(N, dtype=int)
    polished = np.zeros(N, dtype=int)
    done = np.zeros(N, dtype=bool)
    stalled = np.zeros(N, dtype=bool)
    f = _batch_merit(problem, X, Th)
    conv = f <= cfg.residual_tol
    for _ in range(cfg.max_iter):
        act = ~done & ~stalled
        if not act.any():
            break
        a = np.flatnonzero(act)
        with np.errstate(all="ignore"):
            phi, J = _batch_system(problem, X[a], Th[a])
        try:
            d = np.linalg.solve(J, -phi[..., None])[..., 0]
        except np.linalg.LinAlgError:
            d = np.full_like(phi, np.nan)
        slope = np.einsum("ijk,ij,ik->i", J, phi, d)
        ok = np.all(np.isfinite(d), axis=1) & (slope < 0)
        t = np.ones(a.size)
        accepted = np.zeros(a.size, dtype=bool)
        f_new = f[a].copy()
        pending = ok.copy()
        for _ in range(cfg.max_backtracks):
            if not pending.any():
                break
            p = np.flatnonzero(pending)
            trial = X[a[p]] + t[p, None] * d[p]
            ft = _batch_merit(problem, trial, Th[a[p]])
            good = ft <= f[a[p]] + cfg.c1 * t[p] * slope[p]
            gp = p[good]
            X[a[gp]] = trial[good]
            f_new[gp] = ft[good]
            accepted[gp] = True
            pending[gp] = False
            t[p[~good]] *= 0.5
        iters[a] += 1
        was_conv = conv[a]
        # polishing steps on converged samples stop as soon as f stops falling
        stop_polish = was_conv & (~accepted | (f_new >= f[a]))
        polished[a[was_conv]] += 1
        f[a] = np.where(accepted, f_new, f[a])
        stalled[a[~accepted & ~was_conv]] = True
        conv[a] = conv[a] | (f[a] <= cfg.residual_tol)
        done[a] = (was_conv & ((polished[a] >= cfg.polish_steps) | stop_polish))
    # samples the vectorized loop could not handle go through the scalar path
    for i in np.flatnonzero(~conv):
        rep = solve_perturbed(problem, Th[i], X0[i], cfg)
        X[i], f[i], conv[i] = rep.x_star, rep.merit, rep.converged
        iters[i] += rep.iterations
    return X, conv, iters, f


def solve_many(problem: ParametrizedNCP, thetas, warm_start, cfg: SolverConfig = SolverConfig(),
               chunk: int = 8192, threads: Optional[int] = None) -> BatchResult:
    """Solve the NCP for every row of ``thetas``, warm-started from ``warm_start``.

    Uses the problem's batch evaluators when available; otherwise solves the
    samples one by one, optionally on a thread pool. Results are always
    returned in row order.
    """
    Th = np.atleast_2d(np.asarray(thetas, dtype=float))
    N = Th.shape[0]
    x0 = np.asarray(warm_start, dtype=float)
    if problem.has_batch:
        parts = [
            _solve_chunk(problem, Th[s:s + chunk], np.tile(x0, (min(chunk, N - s), 1)), cfg)
            for s in range(0, N, chunk)
        ]
        X, conv, iters, f = (np.concatenate(p) for p in zip(*parts)) if parts else (
            np.empty((0, problem.n)), np.empty(0, bool), np.empty(0, int), np.empty(0))
        return BatchResult(X, conv, iters, f)

    def one(i):
        try:
            return solve_perturbed(problem, Th[i], x0, cfg)
        except EvaluationError as exc:
            return SolveReport(np.full(problem.n, np.nan), 0, np.inf, False, str(exc))

    threads = thread_count() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reps = list(pool.map(one, range(N)))
    else:
        reps = [one(i) for i in range(N)]
    return BatchResult(
        np.array([r.x_star for r in reps]).reshape(N, problem.n),
        np.array([r.converged for r in reps], dtype=bool),
        np.array([r.iterations for r in reps], dtype=int),
        np.array([r.merit for r in reps], dtype=float),
    )


def with_start(cfg: SolverConfig, x0) -> SolverConfig:
    return replace(cfg, x0=None if x0 is None else np.asarray(x0, dtype=float))
