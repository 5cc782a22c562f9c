"""Covariance of primal and dual solutions of equality-constrained convex programs.

For ``min g(x) + c(θ)ᵀx  s.t.  Ax = b(θ)`` the KKT system is linear in the
perturbation, giving ``(Δx, Δy) ≈ T Δθ`` with

    T = [[∇²g, Aᵀ], [A, 0]]⁻¹ [[-∇_θ c], [∇_θ b]].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .montecarlo import SamplingPlan, sample_parameters
from .uq import LinearResponse, propagate_covariance


class AssumptionError(ValueError):
    """A structural assumption (LICQ, strict convexity) does not hold."""


@dataclass(frozen=True)
class EqConstrainedProgram:
    eval_grad_g: Callable
    eval_hess_g: Callable
    c_of_theta: Callable
    jac_c: Callable
    A: np.ndarray
    b_of_theta: Callable
    jac_b: Callable
    theta_mean: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta_mean", np.asarray(self.theta_mean, dtype=float).ravel())
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 1:
            A = A.reshape(0, -1) if A.size == 0 else A[None, :]
        object.__setattr__(self, "A", A)

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def kkt_residual(self, x, y, theta=None) -> float:
        theta = self.theta_mean if theta is None else np.asarray(theta, dtype=float)
        stat = self.eval_grad_g(x) + self.c_of_theta(theta) + self.A.T @ y
        prim = self.A @ x - self.b_of_theta(theta) if self.p else np.zeros(0)
        return float(max(np.max(np.abs(stat), initial=0.0), np.max(np.abs(prim), initial=0.0)))


def quadratic_program(G, A=None, c=None, jac_c=None, b=None, jac_b=None, theta_mean=None) -> EqConstrainedProgram:
    """``g(x) = ½xᵀGx`` with affine ``c(θ)`` and ``b(θ)``.

    Defaults give the unconstrained problem with ``c(θ) = θ``.
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    Jc = np.eye(n) if jac_c is None else np.asarray(jac_c, dtype=float)
    m = Jc.shape[1]
    c0 = np.zeros(n) if c is None else np.asarray(c, dtype=float)
    Jb = np.zeros((A.shape[0], m)) if jac_b is None else np.atleast_2d(np.asarray(jac_b, dtype=float))
    b0 = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
    return EqConstrainedProgram(
        eval_grad_g=lambda x: G @ x,
        eval_hess_g=lambda x: G,
        c_of_theta=lambda th: c0 + Jc @ th,
        jac_c=lambda th: Jc,
        A=A,
        b_of_theta=lambda th: b0 + Jb @ th,
        jac_b=lambda th: Jb,
        theta_mean=np.zeros(m) if theta_mean is None else theta_mean,
    )


def _kkt_matrix(prog: EqConstrainedProgram, x):
    H = np.asarray(prog.eval_hess_g(x), dtype=float)
    n, p = H.shape[0], prog.p
    K = np.zeros((n + p, n + p))
    K[:n, :n] = H
    K[:n, n:] = prog.A.T
    K[n:, :n] = prog.A
    return K, H


def _check_assumptions(prog, H):
    if prog.p and np.linalg.matrix_rank(prog.A) < prog.p:
        raise AssumptionError("constraint matrix A lacks full row rank (LICQ fails); KKT matrix is singular")
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    if ev.min() <= 0:
        raise AssumptionError(
            f"Hessian of g is not positive definite (smallest eigenvalue {ev.min():.3g}); strict convexity fails"
        )


def _solve_kkt(K, rhs):
    try:
        return sla.solve(K, rhs, assume_a="sym")
    except (sla.LinAlgError, ValueError):
        return sla.lu_solve(sla.lu_factor(K), rhs)


def solve_program(prog: EqConstrainedProgram, theta=None, x0=None, tol: float = 1e-12, max_iter: int = 50):
    """Newton's method on the KKT equations; returns ``(x*, y*)``."""
    theta = prog.theta_mean if theta is None else np.asarray(theta, dtype=float)
    n = np.asarray(prog.c_of_theta(theta)).size
    x =np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.zeros(prog.p)
    for _ in range(max_iter):
        K, H = _kkt_matrix(prog, x)
        r = np.concatenate([
            prog.eval_grad_g(x) + prog.c_of_theta(theta) + prog.A.T @ y,
            prog.A @ x - prog.b_of_theta(theta),
        ])
        if np.max(np.abs(r), initial=0.0) <= tol:
            break
        step = _solve_kkt(K, -r)
        x = x + step[:n]
        y = y + step[n:]
    return x, y


def kkt_linear_response(prog: EqConstrainedProgram, x_star, y_star, theta=None, tol: float = 1e-8) -> LinearResponse:
    """Linear response of the stacked primal-dual solution ``(x, y)``.

    Unlike the NCP response, the displacement is ``(Δx, Δy) ≈ +T Δθ``
    (recorded in ``LinearResponse.sign``); covariances are unaffected.
    """
    theta = prog.theta_mean if theta is None else np.asarray(theta, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    res = prog.kkt_residual(x_star, y_star, theta)
    if res > tol:
        raise ValueError(f"(x*, y*) is not a KKT point: residual {res:.3g} > {tol:.3g}")
    K, H = _kkt_matrix(prog, x_star)
    _check_assumptions(prog, H)
    Jc = np.atleast_2d(np.asarray(prog.jac_c(theta), dtype=float))
    Jb = np.asarray(prog.jac_b(theta), dtype=float).reshape(prog.p, Jc.shape[1])
    rhs = np.vstack([-Jc, Jb])
    T = _solve_kkt(K, rhs)
    n, p = x_star.size, prog.p
    s = np.linalg.svd(K, compute_uv=False)
    return LinearResponse(
        T=T, Phi_prime=K, N_matrix=rhs, rank_Phi=n + p, used_pseudoinverse=False,
        singular_values=s, cutoff=np.finfo(float).eps * max(K.shape) * float(s[0]),
        var_labels=tuple(f"x{i}" for i in range(n)) + tuple(f"y{i}" for i in range(p)),
        param_labels=tuple(f"theta{j}" for j in range(Jc.shape[1])),
        sign=1.0,
    )


@dataclass
class QPExactnessReport:
    analytic: np.ndarray
    closed_form: np.ndarray
    empirical: np.ndarray
    exactness_gap: float
    max_abs_deviation: float
    max_z: float
    standard_errors: np.ndarray
    n_samples: int


def verify_qp_exactness(G, C, n_samples: int = 10_000, seed: int = 0,
                        scheme: str = "plain") -> QPExactnessReport:
    """Compare ``T C Tᵀ`` for ``min ½xᵀGx + θᵀx`` with the closed form and with sampling.

    The solution map ``x*(θ) = -G⁻¹θ`` is linear, so the first-order
    covariance must equal ``G⁻¹ C G⁻ᵀ`` exactly; the Monte-Carlo deviation
    should only reflect sampling noise (reported as z-scores).
    """
    G = np.asarray(G, dtype=float)
    C = np.asarray(C, dtype=float)
    n = G.shape[0]
    prog = quadratic_program(G)
    lr = kkt_linear_response(prog, np.zeros(n), np.zeros(0), np.zeros(n))
    analytic = propagate_covariance(lr, C).C_star
    Ginv = np.linalg.inv(G)
    closed = Ginv @ C @ Ginv.T
    thetas = sample_parameters(C, np.zeros(n), SamplingPlan(n_samples, scheme=scheme, seed=seed))
    X = -np.linalg.solve(G, thetas.T).T
    emp = np.cov(X, rowvar=False, ddof=1)
    d = np.sqrt(np.diag(closed))
    se = np.sqrt((np.outer(d, d) ** 2 + closed ** 2) / (n_samples - 1))
    dev = np.abs(emp - closed)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(se > 0, dev / se, 0.0)
    return QPExactnessReport(
        analytic=analytic, closed_form=closed, empirical=emp,
        exactness_gap=float(np.max(np.abs(analytic - closed))),
        max_abs_deviation=float(dev.max()), max_z=float(z.max()),
        standard_errors=se, n_samples=n_samples,
    )
