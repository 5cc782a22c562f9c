"""First-order covariance propagation through an NCP solution.

The linear response ``T`` solves ``Φ'T = N`` where ``Φ'`` and ``N`` are the
x- and θ-Jacobians of the C-function residual at a known solution, with
weakly complementary rows zeroed. A parameter perturbation ``Δθ`` then
moves the solution by ``Δx ≈ -T Δθ`` and ``Cov(x) ≈ T C Tᵀ``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .ncp import MIN, VIOLATED, ParametrizedNCP, SolutionPoint, get_cfunction
from .solver import SolverConfig, solve_perturbed, thread_count

ILL_CONDITIONED = 1e8


class PreconditionError(ValueError):
    pass


class NotPSDError(ValueError):
    def __init__(self, msg, eigenvalues=None):
        super().__init__(msg)
        self.eigenvalues = eigenvalues


@dataclass(frozen=True)
class LinearResponse:
    T: np.ndarray
    Phi_prime: np.ndarray
    N_matrix: np.ndarray
    rank_Phi: int
    used_pseudoinverse: bool
    singular_values: np.ndarray
    cutoff: float
    zero_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    var_labels: Optional[Sequence[str]] = None
    param_labels: Optional[Sequence[str]] = None
    # Δx ≈ sign · T Δθ; NCP responses use -1, KKT responses +1
    sign: float = -1.0

    @property
    def shape(self):
        return self.T.shape


@dataclass(frozen=True)
class CovarianceModel:
    C: np.ndarray
    labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        C = np.array(self.C, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"covariance must be square, got shape {C.shape}")
        object.__setattr__(self, "C", C)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != C.shape[0]:
                raise ValueError("label count does not match covariance size")

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def validate(self) -> "CovarianceModel":
        """Raise ``NotPSDError`` unless C is symmetric and PSD (up to rounding)."""
        C = self.C
        scale = max(1.0, float(np.max(np.abs(C), initial=0.0)))
        asym = float(np.max(np.abs(C - C.T), initial=0.0))
        if asym > 1e-12 * scale:
            raise NotPSDError(f"covariance is not symmetric (max asymmetry {asym:.3g})")
        ev = np.linalg.eigvalsh(0.5 * (C + C.T))
        floor = -1e-10 * max(float(np.trace(C)), np.finfo(float).tiny)
        if ev.size and ev.min() < floor:
            raise NotPSDError(
                f"covariance is not PSD: smallest eigenvalue {ev.min():.6g} (floor {floor:.3g})",
                eigenvalues=ev,
            )
        return self


@dataclass(frozen=True)
class PropagationResult:
    C_star: np.ndarray
    S: np.ndarray
    kappa_H: float
    diagnostics: dict

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.C_star), 0.0, None))

    def correlation(self) -> np.ndarray:
        s = self.std
        with np.errstate(invalid="ignore", divide="ignore"):
            R = self.C_star / np.outer(s, s)
        return R


def _rows(problem: ParametrizedNCP, sol: SolutionPoint, psi):
    G = problem.G(sol.x_star, sol.theta)
    L = problem.L(sol.x_star, sol.theta)
    mask = problem.cone.mask
    Phi = G.copy()
    N = L.copy()
    idx = np.flatnonzero(mask)
    da, db = psi.derivatives(sol.x_star[idx], sol.F_star[idx])
    Phi[idx] = db[:, None] * G[idx]
    Phi[idx, idx] += da
    N[idx] = db[:, None] * L[idx]
    z = sol.zero_set
    Phi[z] = 0.0
    N[z] = 0.0
    return Phi, N


def solve_response(Phi: np.ndarray, N: np.ndarray, rcond: Optional[float] = None):
    """Solve ``Phi T = N``: LU when Phi has full rank, minimum-norm least squares otherwise.

    Returns ``(T, rank, used_pinv, singular_values, cutoff)``.
    """
    n = Phi.shape[0]
    m = N.shape[1]
    U, s, Vt = np.linalg.svd(Phi)
    smax = float(s[0]) if s.size else 0.0
    cutoff = (np.finfo(float).eps * max(n, m) if rcond is None else rcond) * smax
    rank = int(np.sum(s > cutoff))
    if rank == n and n > 0:
        T = sla.lu_solve(sla.lu_factor(Phi), N)
        return T, rank, False, s, cutoff
    inv = np.zeros_like(s)
    inv[:rank] = 1.0 / s[:rank]
    T = Vt.T @ (inv[:, None] * (U.T @ N))
    return T, rank, True, s, cutoff


def build_linear_response(problem: ParametrizedNCP, sol: SolutionPoint, psi=MIN,
                          rcond: Optional[float] = None) -> LinearResponse:
    if not isinstance(sol, SolutionPoint):
        raise PreconditionError("build_linear_response needs a classified SolutionPoint")
    bad = sol.indices(VIOLATED)
    if bad.size:
        raise PreconditionError(
            f"point is not a solution: indices {bad.tolist()} are neither complementary nor weak"
        )
    psi = get_cfunction(psi)
    Phi, N = _rows(problem, sol, psi)
    T, rank, pinv, s, cutoff = solve_response(Phi, N, rcond)
    return LinearResponse(
        T=T, Phi_prime=Phi, N_matrix=N, rank_Phi=rank, used_pseudoinverse=pinv,
        singular_values=s, cutoff=cutoff, zero_set=sol.zero_set.copy(),
        var_labels=tuple(problem.var_labels), param_labels=tuple(problem.param_labels),
    )


def _as_cov(C) -> CovarianceModel:
    return C if isinstance(C, CovarianceModel) else CovarianceModel(np.asarray(C, dtype=float))


def propagate_covariance(lr: LinearResponse, C) -> PropagationResult:
    """``C* = T C Tᵀ``; the same ``lr`` serves any number of covariance scenarios."""
    cov = _as_cov(C).validate()
    if cov.m != lr.T.shape[1]:
        raise ValueError(f"covariance is {cov.m}x{cov.m} but T has {lr.T.shape[1]} columns")
    T = lr.T
    C_star = T @ cov.C @ T.T
    C_star = 0.5 * (C_star + C_star.T)
    kappa = condition_diagnostic(lr)
    return PropagationResult(
        C_star=C_star,
        S=sensitivity(lr),
        kappa_H=kappa,
        diagnostics=diagnostics(lr),
    )


def sensitivity(lr: LinearResponse) -> np.ndarray:
    """Total linear sensitivity: Euclidean norm of each column of T."""
    return np.linalg.norm(lr.T, axis=0)


def relative_sensitivity(lr: LinearResponse, theta, shift: float = 0.01) -> np.ndarray:
    """Output movement for a relative ``shift`` of each parameter (tornado bar length)."""
    return sensitivity(lr) * np.abs(np.asarray(theta, dtype=float)) * shift


def tornado(values, labels) -> list:
    """(label, value) pairs sorted by decreasing value."""
    order = np.argsort(-np.asarray(values), kind="stable")
    return [(labels[i], float(values[i])) for i in order]


def trace_uncertainty(C_star) -> float:
    C_star = np.asarray(C_star, dtype=float)
    if C_star.ndim != 2 or C_star.shape[0] != C_star.shape[1]:
        raise ValueError("trace needs a square matrix")
    return float(np.trace(C_star))


def condition_diagnostic(lr: LinearResponse) -> float:
    """Condition number of ``Φ'ᵀΦ'`` over its nonzero spectrum."""
    s = lr.singular_values
    nz = s[s > lr.cutoff]
    if nz.size == 0:
        return float("inf")
    return float((nz[0] / nz[-1]) ** 2)


def diagnostics(lr: LinearResponse) -> dict:
    kappa = condition_diagnostic(lr)
    return {
        "n": int(lr.T.shape[0]),
        "m": int(lr.T.shape[1]),
        "rank": int(lr.rank_Phi),
        "kappa_H": kappa,
        "ill_conditioned": bool(kappa > ILL_CONDITIONED),
        "zero_set": [int(i) for i in lr.zero_set],
        "used_pseudoinverse": bool(lr.used_pseudoinverse),
    }


# -- input covariance builders ----------------------------------------

def diagonal_cv(theta, cv: float, labels=None) -> CovarianceModel:
    """Independent parameters, each with standard deviation ``cv·|θ_j|``."""
    theta = np.asarray(theta, dtype=float)
    return CovarianceModel(np.diag((cv * theta) ** 2), labels)


def with_correlation(cov: CovarianceModel, i: int, j: int, rho: float) -> CovarianceModel:
    C = cov.C.copy()
    c = rho * np.sqrt(C[i, i] * C[j, j])
    C[i, j] = C[j, i] = c
    return CovarianceModel(C, cov.labels)


def wiener_covariance(mu, cv: float, times, variance_scale: float = 1.0, labels=None) -> CovarianceModel:
    """Covariance of a drifted Brownian path observed at ``times``.

    The diffusion is ``σ = cv·mean(mu)``, so ``Cov(θ(t_i), θ(t_j)) = σ²·min(t_i, t_j)``,
    optionally multiplied by ``variance_scale``.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    t = np.asarray(times, dtype=float).ravel()
    if mu.size != t.size:
        raise ValueError("mu and times must have the same length")
    if cv < 0:
        raise ValueError("cv must be nonnegative")
    if t.size == 0 or t[0] <= 0:
        raise ValueError("observation times must be positive")
    if np.any(np.diff(t) <= 0):
        raise ValueError("observation times must be strictly increasing")
    sigma = cv * float(np.mean(mu))
    C = variance_scale * sigma ** 2 * np.minimum.outer(t, t)
    return CovarianceModel(C, labels)


def block_covariance(blocks, cross: Optional[dict] = None) -> CovarianceModel:
    """Assemble a block-diagonal covariance, optionally with off-diagonal blocks.

    ``blocks`` is a sequence of CovarianceModel (or arrays); ``cross`` maps
    ``(i, j)`` block index pairs to the ``i``-by-``j`` cross-covariance block.
    """
    blocks = [_as_cov(b) for b in blocks]
    C = sla.block_diag(*[b.C for b in blocks]) if blocks else np.zeros((0, 0))
    offs = np.cumsum([0] + [b.m for b in blocks])
    for (i, j), B in (cross or {}).items():
        B = np.asarray(B, dtype=float)
        C[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = B
        C[offs[j]:offs[j + 1], offs[i]:offs[i + 1]] = B.T
    labels = None
    if all(b.labels is not None for b in blocks):
        labels = tuple(lab for b in blocks for lab in b.labels)
    return CovarianceModel(C, labels)


# -- finite-difference oracle -----------------------------------------

@dataclass
class FiniteDifferenceResult:
    T: np.ndarray
    failed: np.ndarray
    delta: float


def finite_difference_T(problem: ParametrizedNCP, sol: SolutionPoint, delta: float = 1e-5,
                        cfg: SolverConfig = SolverConfig(), central: bool = False,
                        threads: Optional[int] = None) -> FiniteDifferenceResult:
    """Estimate T column by column from re-solved perturbed problems.

    Column d is ``-(x*(θ̄ + δe_d) - x*(θ̄)) / δ`` (or the central variant).
    Columns whose perturbed solve fails are NaN and flagged in ``failed``.
    """
    theta = sol.theta
    base = solve_perturbed(problem, theta, sol.x_star, cfg)
    x0 = base.x_star if base.converged else sol.x_star

    def column(d):
        e = np.zeros(problem.m)
        e[d] = delta
        up = solve_perturbed(problem, theta + e, x0, cfg)
        if central:
            dn = solve_perturbed(problem, theta - e, x0, cfg)
            ok = up.converged and dn.converged
            col = -(up.x_star - dn.x_star) / (2 * delta)
        else:
            ok = up.converged
            col = -(up.x_star - x0) / delta
        return col if ok else np.full(problem.n, np.nan), not ok

    threads = thread_count() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            cols = list(pool.map(column, range(problem.m)))
    else:
        cols = [column(d) for d in range(problem.m)]
    T = np.column_stack([c for c, _ in cols]) if cols else np.zeros((problem.n, 0))
    failed = np.array([f for _, f in cols], dtype=bool)
    return FiniteDifferenceResult(T, failed, delta)


def columnwise_relative_error(T_ref, T_est, zero_tol: float = 1e-9) -> np.ndarray:
    """‖T_est[:, d] - T_ref[:, d]‖ / ‖T_ref[:, d]‖ per column.

    Columns of ``T_ref`` below ``zero_tol·max column norm`` are compared in
    absolute terms instead.
    """
    T_ref = np.asarray(T_ref, dtype=float)
    T_est = np.asarray(T_est, dtype=float)
    norms = np.linalg.norm(T_ref, axis=0)
    diff = np.linalg.norm(T_est - T_ref, axis=0)
    floor = zero_tol * max(float(norms.max(initial=0.0)), 1.0)
    return np.where(norms > floor, diff / np.where(norms > floor, norms, 1.0), diff)
