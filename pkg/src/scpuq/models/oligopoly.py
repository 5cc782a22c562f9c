"""Single-node Nash-Cournot oligopoly with linear inverse demand ``P = a + bQ``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ncp import ConeSpec, ParametrizedNCP


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OligopolyConfig:
    a: float
    b: float
    gamma: tuple

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if not self.b < 0:
            raise ConfigError(f"demand slope b must be negative, got {self.b}")
        if not self.a > 0:
            raise ConfigError(f"demand intercept a must be positive, got {self.a}")
        if len(self.gamma) < 1:
            raise ConfigError("need at least one player")

    @property
    def k(self) -> int:
        return len(self.gamma)

    @property
    def theta(self) -> np.ndarray:
        return np.array([*self.gamma, self.a, self.b])


def duopoly() -> OligopolyConfig:
    """Two players with mean parameters (γ1, γ2, a, b) = (2, 1, 15, -1)."""
    return OligopolyConfig(a=15.0, b=-1.0, gamma=(2.0, 1.0))


def cost_ladder(n: int) -> OligopolyConfig:
    """n players, a = 500, b = -0.5, unit costs 100 + 3i for i = 1..n."""
    return OligopolyConfig(a=500.0, b=-0.5, gamma=tuple(100.0 + 3.0 * i for i in range(1, n + 1)))


def cost_ladder_covariance(n: int) -> np.ndarray:
    """Unit variance on every cost, no uncertainty on the demand curve."""
    C = np.zeros((n + 2, n + 2))
    C[np.arange(n), np.arange(n)] = 1.0
    return C


def make_oligopoly(cfg: OligopolyConfig) -> ParametrizedNCP:
    k = cfg.k

    def F(x, th):
        g, a, b = th[:k], th[k], th[k + 1]
        return g - a - b * x.sum() - b * x

    def G(x, th):
        b = th[k + 1]
        return -b * (np.ones((k, k)) + np.eye(k))

    def L(x, th):
        out = np.zeros((k, k + 2))
        out[:, :k] = np.eye(k)
        out[:, k] = -1.0
        out[:, k + 1] = -x.sum() - x
        return out

    def F_batch(X, Th):
        g, a, b = Th[:, :k], Th[:, k:k + 1], Th[:, k + 1:k + 2]
        return g - a - b * X.sum(axis=1, keepdims=True) - b * X

    def G_batch(X, Th):
        b = Th[:, k + 1]
        return -b[:, None, None] * (np.ones((k, k)) + np.eye(k))[None]

    return ParametrizedNCP(
        n=k,
        m=k + 2,
        cone=ConeSpec.nonnegative_orthant(k),
        theta_mean=cfg.theta,
        eval_F=F,
        eval_G=G,
        eval_L=L,
        var_labels=tuple(f"Q{i + 1}" for i in range(k)),
        param_labels=tuple(f"gamma{i + 1}" for i in range(k)) + ("a", "b"),
        eval_F_batch=F_batch,
        eval_G_batch=G_batch,
        name=f"oligopoly-{k}",
    )


def cournot_closed_form(cfg: OligopolyConfig) -> np.ndarray:
    """Equilibrium outputs by active-set iteration on the interior formula.

    Players whose interior output would be negative are priced out and the
    interior system is re-solved over the rest until all outputs are >= 0.
    """
    c = np.asarray(cfg.gamma, dtype=float)
    active = np.ones(c.size, dtype=bool)
    while True:
        k = active.sum()
        total = (c[active].sum() - k * cfg.a) / (cfg.b * (k + 1))
        price = cfg.a + cfg.b * total
        q = np.where(active, (price - c) / (-cfg.b), 0.0)
        negative = active & (q < 0)
        if not negative.any():
            return q
        active &= ~negative


def market_price(cfg: OligopolyConfig, q) -> float:
    return cfg.a + cfg.b * float(np.sum(q))
