"""Parametrized nonlinear complementarity problems.

A problem is ``K ∋ x ⊥ F(x; θ) ∈ K*`` where ``K`` constrains a subset of
coordinates to be nonnegative and leaves the rest free. This module holds
the problem representation, the C-functions used to recast it as a root
finding / least-squares problem, and the activity classification of a
known solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

FREE = "free"
STRONG_X = "strong-x"
STRONG_F = "strong-F"
WEAK = "weak"
VIOLATED = "violated"


class InfeasiblePointError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConeSpec:
    """Product of half lines (indices in ``nonneg``) and full lines."""

    n: int
    nonneg: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nonneg", frozenset(int(i) for i in self.nonneg))
        bad = [i for i in self.nonneg if not 0 <= i < self.n]
        if bad:
            raise ShapeError(f"cone indices {bad} outside 0..{self.n - 1}")

    @classmethod
    def nonnegative_orthant(cls, n: int) -> "ConeSpec":
        return cls(n, frozenset(range(n)))

    @classmethod
    def from_mask(cls, mask) -> "ConeSpec":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask.size, frozenset(np.flatnonzero(mask).tolist()))

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[list(self.nonneg)] = True
        return m

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x[self.mask] >= -tol))

    def dual_contains(self, v, tol: float = 0.0) -> bool:
        """Membership in the dual cone: nonneg on the cone indices, zero elsewhere."""
        v = np.asarray(v, dtype=float)
        m = self.mask
        return bool(np.all(v[m] >= -tol) and np.all(np.abs(v[~m]) <= tol))


class CKind(str, Enum):
    MIN = "min"
    FB = "fischer-burmeister"


@dataclass(frozen=True)
class CFunction:
    """A C-function ψ(a, b), zero exactly when a, b >= 0 and ab = 0.

    All methods broadcast over numpy arrays.
    """

    kind: CKind

    def psi(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind is CKind.MIN:
            return np.minimum(a, b)
        return np.hypot(a, b) - a - b

    def derivatives(self, a, b):
        """Return ``(dψ/da, dψ/db)``.

        Non-differentiable points follow fixed conventions: for ``min`` the
        tie ``a == b`` takes the b-branch, and Fischer-Burmeister returns
        (-1, -1) at the origin.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind is CKind.MIN:
            da = (a < b).astype(float)
            return da, 1.0 - da
        r = np.hypot(a, b)
        safe = np.where(r > 0, r, 1.0)
        da = np.where(r > 0, a / safe - 1.0, -1.0)
        db = np.where(r > 0, b / safe - 1.0, -1.0)
        return da, db

    def psi_a(self, a, b):
        return self.derivatives(a, b)[0]

    def psi_b(self, a, b):
        return self.derivatives(a, b)[1]


MIN = CFunction(CKind.MIN)
FB = CFunction(CKind.FB)


def get_cfunction(name) -> CFunction:
    if isinstance(name, CFunction):
        return name
    key = str(name).lower()
    if key in ("min", "minimum"):
        return MIN
    if key in ("fb", "fischer-burmeister", "fischer_burmeister"):
        return FB
    raise ValueError(f"unknown C-function {name!r}")


ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ParametrizedNCP:
    """``F`` with its x- and θ-Jacobians, the cone and the mean parameters.

    ``eval_G(x, θ)[i, j] = dF_i/dx_j`` and ``eval_L(x, θ)[i, j] = dF_i/dθ_j``.
    The optional batch evaluators take stacked ``(N, n)`` / ``(N, m)``
    arrays and let the solver work on many parameter draws at once.
    """

    n: int
    m: int
    cone: ConeSpec
    theta_mean: np.ndarray
    eval_F: ArrayFn
    eval_G: ArrayFn
    eval_L: ArrayFn
    var_labels: Optional[Sequence[str]] = None
    param_labels: Optional[Sequence[str]] = None
    eval_F_batch: Optional[ArrayFn] = None
    eval_G_batch: Optional[ArrayFn] = None
    name: str = "ncp"
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        theta = np.asarray(self.theta_mean, dtype=float).ravel()
        object.__setattr__(self, "theta_mean", theta)
        if theta.size != self.m:
            raise ShapeError(f"theta_mean has {theta.size} entries, expected m={self.m}")
        if self.cone.n != self.n:
            raise ShapeError(f"cone dimension {self.cone.n} != n={self.n}")
        if self.var_labels is None:
            object.__setattr__(self, "var_labels", tuple(f"x{i}" for i in range(self.n)))
        if self.param_labels is None:
            object.__setattr__(self, "param_labels", tuple(f"theta{j}" for j in range(self.m)))
        if len(self.var_labels) != self.n or len(self.param_labels) != self.m:
            raise ShapeError("label counts do not match (n, m)")
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=float).ravel()
            if x0.size != self.n:
                raise ShapeError(f"x0 has {x0.size} entries, expected n={self.n}")
            object.__setattr__(self, "x0", x0)

    def _theta(self, theta):
        theta = self.theta_mean if theta is None else np.asarray(theta, dtype=float)
        if theta.shape != (self.m,):
            raise ShapeError(f"theta must have shape ({self.m},), got {theta.shape}")
        return theta

    def _x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ShapeError(f"x must have shape ({self.n},), got {x.shape}")
        return x

    def F(self, x, theta=None) -> np.ndarray:
        return np.asarray(self.eval_F(self._x(x), self._theta(theta)), dtype=float)

    def G(self, x, theta=None) -> np.ndarray:
        return np.asarray(self.eval_G(self._x(x), self._theta(theta)), dtype=float)

    def L(self, x, theta=None) -> np.ndarray:
        return np.asarray(self.eval_L(self._x(x), self._theta(theta)), dtype=float)

    def F_batch(self, X, Theta) -> np.ndarray:
        if self.eval_F_batch is not None:
            return np.asarray(self.eval_F_batch(X, Theta), dtype=float)
        return np.stack([self.F(x, t) for x, t in zip(X, Theta)])

    def G_batch(self, X, Theta) -> np.ndarray:
        if self.eval_G_batch is not None:
            return np.asarray(self.eval_G_batch(X, Theta), dtype=float)
        return np.stack([self.G(x, t) for x, t in zip(X, Theta)])

    @property
    def has_batch(self) -> bool:
        return self.eval_F_batch is not None and self.eval_G_batch is not None


def derivative_mismatch(problem: ParametrizedNCP, x, theta=None, h: float = 1e-5):
    """Largest relative gap between the analytic Jacobians and central differences.

    Returns ``(err_G, err_L)``, each scaled by ``max(1, max|analytic|)``.
    """
    x = np.asarray(x, dtype=float)
    theta = problem._theta(theta)
    G = problem.G(x, theta)
    L = problem.L(x, theta)
    G_fd = np.empty_like(G)
    for j in range(problem.n):
        e = np.zeros(problem.n)
        e[j] = h
        G_fd[:, j] = (problem.F(x + e, theta) - problem.F(x - e, theta)) / (2 * h)
    L_fd = np.empty_like(L)
    for j in range(problem.m):
        e = np.zeros(problem.m)
        e[j] = h
        L_fd[:, j] = (problem.F(x, theta + e) - problem.F(x, theta - e)) / (2 * h)
    err_G = np.max(np.abs(G - G_fd), initial=0.0) / max(1.0, np.max(np.abs(G), initial=0.0))
    err_L = np.max(np.abs(L - L_fd), initial=0.0) / max(1.0, np.max(np.abs(L), initial=0.0))
    return err_G, err_L


@dataclass(frozen=True)
class SolutionPoint:
    """A solution at fixed parameters plus its per-index activity labels."""

    x_star: np.ndarray
    F_star: np.ndarray
    theta: np.ndarray
    activity: tuple
    tau: float

    @property
    def zero_set(self) -> np.ndarray:
        """Indices of weakly complementary pairs (both x_i and F_i vanish)."""
        return np.array([i for i, a in enumerate(self.activity) if a == WEAK], dtype=int)

    def indices(self, label: str) -> np.ndarray:
        return np.array([i for i, a in enumerate(self.activity) if a == label], dtype=int)

    def counts(self) -> dict:
        out = {FREE: 0, STRONG_X: 0, STRONG_F: 0, WEAK: 0, VIOLATED: 0}
        for a in self.activity:
            out[a] += 1
        return out


def default_tau(x_star) -> float:
    return 1e-6 * max(1.0, float(np.max(np.abs(x_star), initial=0.0)))


def classify_activity(problem: ParametrizedNCP, x_star, theta=None, tau: Optional[float] = None) -> SolutionPoint:
    x = problem._x(x_star).copy()
    theta = problem._theta(theta)
    if tau is None:
        tau = default_tau(x)
    F = problem.F(x, theta)
    mask = problem.cone.mask
    bad = np.flatnonzero(mask & (x < -tau))
    if bad.size:
        raise InfeasiblePointError(
            f"x has negative entries at cone indices {bad.tolist()} (min {x[bad].min():.3g}, tau={tau:.3g})"
        )
    labels = []
    for i in range(problem.n):
        if not mask[i]:
            labels.append(FREE)
        elif abs(x[i]) <= tau and abs(F[i]) <= tau:
            labels.append(WEAK)
        elif x[i] > tau and abs(F[i]) <= tau:
            labels.append(STRONG_X)
        elif F[i] > tau and abs(x[i]) <= tau:
            labels.append(STRONG_F)
        else:
            labels.append(VIOLATED)
    return SolutionPoint(x_star=x, F_star=F, theta=theta.copy(), activity=tuple(labels), tau=float(tau))


def merit_vector(problem: ParametrizedNCP, sol: Optional[SolutionPoint], psi, x, theta=None) -> np.ndarray:
    """Residual vector Φ.

    Free rows carry ``F_i``; cone rows carry ``ψ(x_i, F_i)``, squared on the
    weak set of ``sol``. The weak set stays frozen at whatever ``sol`` holds,
    even when evaluating far from ``sol.x_star``. ``sol=None`` means no
    squared rows.
    """
    psi = get_cfunction(psi)
    x = problem._x(x)
    F = problem.F(x, theta)
    mask = problem.cone.mask
    out = F.copy()
    out[mask] = psi.psi(x[mask], F[mask])
    if sol is not None and len(sol.zero_set):
        z = sol.zero_set
        out[z] = psi.psi(x[z], F[z]) ** 2
    return out


def merit_scalar(problem: ParametrizedNCP, sol: Optional[SolutionPoint], psi, x, theta=None) -> float:
    phi = merit_vector(problem, sol, psi, x, theta)
    return 0.5 * float(phi @ phi)


@dataclass(frozen=True)
class SolutionCheck:
    ok: bool
    primal_violation: float
    dual_violation: float
    free_residual: float
    complementarity: float
    max_pair_product: float

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "primal_violation": self.primal_violation,
            "dual_violation": self.dual_violation,
            "free_residual": self.free_residual,
            "complementarity": self.complementarity,
            "max_pair_product": self.max_pair_product,
        }


def check_solution(problem: ParametrizedNCP, x, theta=None, tol: float = 1e-8) -> SolutionCheck:
    """Report how far ``x`` is from solving the NCP.

    ``ok`` requires x in K, F in K* (nonneg on cone rows, zero on free rows)
    and ``|xᵀF| <= tol``, each to within ``tol``.
    """
    x = problem._x(x)
    F = problem.F(x, theta)
    m = problem.cone.mask
    primal = float(np.max(-x[m], initial=0.0))
    dual = float(np.max(-F[m], initial=0.0))
    free = float(np.max(np.abs(F[~m]), initial=0.0))
    comp = abs(float(x @ F))
    pair = float(np.max(np.abs(x[m] * F[m]), initial=0.0))
    primal, dual = max(primal, 0.0), max(dual, 0.0)
    ok = primal <= tol and dual <= tol and free <= tol and comp <= tol
    return SolutionCheck(bool(ok), primal, dual, free, comp, pair)
