"""Multi-year natural-gas market equilibrium as a single NCP.

Producers maximise discounted profit under a Golombek production cost and
ship gas through a pipeline network; a pipeline operator prices and expands
arc capacity; consumers follow linear inverse demand. Stacking every
player's KKT conditions with market clearing gives a square mixed
complementarity problem.

The random parameters are the demand intercepts and slopes, the linear and
quadratic production cost coefficients, arc operating costs and the two
expansion prices, each indexed by entity and year.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..ncp import ConeSpec, ParametrizedNCP
from ..sparse import SparseNdArray
from ..uq import CovarianceModel, block_covariance, wiener_covariance

THETA_FAMILIES = ("dem_int", "dem_slope", "lin", "quad", "arc_cost", "exp_price_p", "exp_price_a")
DEMAND_FAMILIES = ("dem_int", "dem_slope")
EXPANSION_FAMILIES = ("exp_price_p", "exp_price_a")
CAP_CLAMP = 1e-9


class AssemblyError(ValueError):
    pass


class DomainError(ValueError):
    pass


# -- Golombek cost ----------------------------------------------------

def golombek_cost(q, cap, lin, glb, quad):
    """Production cost and marginal cost.

    cost = (l + g)q + quad·q² + g(cap - q)·log(1 - q/cap); the marginal cost
    l + 2·quad·q - g·log(1 - q/cap) grows without bound as q approaches cap.
    """
    q = np.asarray(q, dtype=float)
    cap = np.asarray(cap, dtype=float)
    if np.any(q >= cap) or np.any(cap <= 0):
        raise DomainError("Golombek cost needs 0 <= q < cap")
    r = np.log1p(-q / cap)
    cost = (lin + glb) * q + quad * q ** 2 + glb * (cap - q) * r
    return cost, lin + 2 * quad * q - glb * r


def golombek_cap_derivative(q, cap, glb):
    """∂cost/∂cap = g·(log(1 - q/cap) + q/cap) (never positive)."""
    q = np.asarray(q, dtype=float)
    cap = np.asarray(cap, dtype=float)
    if np.any(q >= cap) or np.any(cap <= 0):
        raise DomainError("Golombek cost needs 0 <= q < cap")
    return glb * (np.log1p(-q / cap) + q / cap)


def calibrate_demand(price_ref: float, qty_ref: float, elasticity: float):
    """Linear inverse demand through (qty_ref, price_ref) with the given point elasticity.

    Returns ``(intercept, slope)``.
    """
    if qty_ref <= 0 or price_ref <= 0:
        raise ValueError("reference price and quantity must be positive")
    if elasticity <= 0:
        raise ValueError("elasticity must be positive")
    slope = -price_ref / (elasticity * qty_ref)
    return price_ref - slope * qty_ref, slope


# -- model ------------------------------------------------------------

@dataclass
class VarianceScale:
    entity: str
    factor: float
    families: tuple = ("lin", "quad")


@dataclass
class GasMarketModel:
    """Sets and (entity, year)-indexed parameters of the gas market.

    Per-year arrays have shape (entities, years). Synthetic instances should
    say so in ``name``; no unit inference happens, ``units`` is descriptive.
    """

    nodes: tuple
    years: tuple
    suppliers: tuple
    supplier_node: tuple
    consumers: tuple
    consumer_node: tuple
    arcs: tuple
    arc_from: tuple
    arc_to: tuple
    discount: np.ndarray
    avail: np.ndarray
    cap0_p: np.ndarray
    loss_p: np.ndarray
    lin: np.ndarray
    glb: np.ndarray
    quad: np.ndarray
    exp_price_p: np.ndarray
    cap0_a: np.ndarray
    loss_a: np.ndarray
    arc_cost: np.ndarray
    exp_price_a: np.ndarray
    dem_int: np.ndarray
    dem_slope: np.ndarray
    times: Optional[np.ndarray] = None
    units: dict = field(default_factory=dict)
    variance_scale: list = field(default_factory=list)
    name: str = "gas"

    def __post_init__(self):
        Y, P, C, A = len(self.years), len(self.suppliers), len(self.consumers), len(self.arcs)

        def per_year(v, rows, what):
            v = np.asarray(v, dtype=float)
            if v.ndim == 0:
                v = np.full((rows, Y), float(v))
            elif v.ndim == 1 and v.size == rows:
                v = np.repeat(v[:, None], Y, axis=1)
            if v.shape != (rows, Y):
                raise AssemblyError(f"{what}: expected shape ({rows}, {Y}), got {v.shape}")
            return v

        def per_entity(v, rows, what):
            v = np.asarray(v, dtype=float)
            if v.ndim == 0:
                v = np.full(rows, float(v))
            if v.shape != (rows,):
                raise AssemblyError(f"{what}: expected {rows} entries, got shape {v.shape}")
            return v

        self.discount = np.asarray(self.discount, dtype=float).reshape(-1)
        if self.discount.size != Y:
            raise AssemblyError(f"discount: expected {Y} entries")
        self.avail = per_entity(self.avail, P, "avail")
        self.cap0_p = per_entity(self.cap0_p, P, "cap0_p")
        self.cap0_a = per_entity(self.cap0_a, A, "cap0_a")
        for nm, rows in (("loss_p", P), ("lin", P), ("glb", P), ("quad", P), ("exp_price_p", P),
                         ("loss_a", A), ("arc_cost", A), ("exp_price_a", A),
                         ("dem_int", C), ("dem_slope", C)):
            setattr(self, nm, per_year(getattr(self, nm), rows, nm))
        if len(self.arc_from) != A or len(self.arc_to) != A:
            raise AssemblyError("arc incidence lists must have one entry per arc")
        self.times = np.arange(1.0, Y + 1) if self.times is None else np.asarray(self.times, dtype=float)
        self.variance_scale = [v if isinstance(v, VarianceScale) else VarianceScale(**v)
                               for v in self.variance_scale]
        self.validate()

    @property
    def dims(self):
        return len(self.suppliers), len(self.consumers), len(self.nodes), len(self.arcs), len(self.years)

    def validate(self):
        P, C, N, A, Y = self.dims
        errs = []
        for what, idx, names in (("supplier", self.supplier_node, self.suppliers),
                                 ("consumer", self.consumer_node, self.consumers)):
            if len(idx) != len(names):
                errs.append(f"{what} node list length mismatch")
            for nm, n in zip(names, idx):
                if not 0 <= n < N:
                    errs.append(f"{what} {nm!r}: unknown node index {n}")
        for nm, f, t in zip(self.arcs, self.arc_from, self.arc_to):
            if not (0 <= f < N and 0 <= t < N):
                errs.append(f"arc {nm!r}: endpoint outside node set")
            elif f == t:
                errs.append(f"arc {nm!r}: leaves and enters the same node")
        if len(self.times) != Y or np.any(self.times <= 0) or np.any(np.diff(self.times) <= 0):
            errs.append("times must be positive and strictly increasing, one per year")
        checks = [
            (self.dem_slope < 0, "dem_slope must be negative", self.consumers),
            ((self.avail > 0) & (self.avail <= 1), "avail must lie in (0, 1]", self.suppliers),
            ((self.loss_p >= 0) & (self.loss_p < 1), "loss_p must lie in [0, 1)", self.suppliers),
            ((self.loss_a >= 0) & (self.loss_a < 1), "loss_a must lie in [0, 1)", self.arcs),
            (self.glb >= 0, "glb must be nonnegative", self.suppliers),
            (self.cap0_p > 0, "cap0_p must be positive", self.suppliers),
            (self.cap0_a >= 0, "cap0_a must be nonnegative", self.arcs),
        ]
        for ok, msg, names in checks:
            ok = np.asarray(ok)
            if ok.size == 0:
                continue
            bad = np.flatnonzero(~ok.reshape(ok.shape[0], -1).all(axis=1))
            for b in bad:
                errs.append(f"{names[b]!r}: {msg}")
        if not np.all((self.discount > 0) & (self.discount <= 1)):
            errs.append("discount factors must lie in (0, 1]")
        if not errs:
            served = set()
            for p in range(P):
                served |= self.reachable(p)
            for c, n in enumerate(self.consumer_node):
                if n not in served:
                    errs.append(f"consumer {self.consumers[c]!r} is not reachable from any supplier")
        if errs:
            raise AssemblyError("; ".join(errs))

    def reachable(self, p: int) -> set:
        """Nodes reachable from supplier p's home node along directed arcs."""
        start = self.supplier_node[p]
        seen = {start}
        queue = deque([start])
        while queue:
            n = queue.popleft()
            for f, t in zip(self.arc_from, self.arc_to):
                if f == n and t not in seen:
                    seen.add(t)
                    queue.append(t)
        return seen

    def theta_arrays(self) -> dict:
        return {fam: getattr(self, fam) for fam in THETA_FAMILIES}

    def entity_names(self, family: str):
        if family in ("dem_int", "dem_slope"):
            return self.consumers
        if family in ("lin", "quad", "exp_price_p"):
            return self.suppliers
        return self.arcs


# -- index maps -------------------------------------------------------

class GasVariableIndex:
    """Bijection between named market variables and flat NCP coordinates.

    Keys are tuples ``(kind, *indices)``, e.g. ``("Q_pcy", p, c, y)``.
    Quantities, expansions, capacities and inequality duals live in the
    nonnegative cone; prices and equality duals are free.
    """

    NONNEG = {"Q_pcy", "Q_py", "Q_pay", "X_py", "Cap_py", "alpha_b", "Q_ay", "X_ay", "Cap_ay", "alpha_h"}
    FREE = {"alpha_c", "alpha_d", "alpha_i", "pi_cy", "pi_ay"}

    def __init__(self, model: GasMarketModel, substitute_capacity: bool = True):
        self.substitute_capacity = substitute_capacity
        self.keys: list = []
        self._pos: dict = {}
        P, C, N, A, Y = model.dims
        self.reach = [model.reachable(p) for p in range(P)]
        self.p_consumers = [[c for c in range(C) if model.consumer_node[c] in self.reach[p]] for p in range(P)]
        self.p_arcs = [[a for a in range(A) if model.arc_from[a] in self.reach[p]] for p in range(P)]
        for y in range(Y):
            for p in range(P):
                for c in self.p_consumers[p]:
                    self._add(("Q_pcy", p, c, y))
                self._add(("Q_py", p, y))
                for a in self.p_arcs[p]:
                    self._add(("Q_pay", p, a, y))
                self._add(("X_py", p, y))
                if not substitute_capacity:
                    self._add(("Cap_py", p, y))
                self._add(("alpha_b", p, y))
                if not substitute_capacity:
                    self._add(("alpha_c", p, y))
                for n in sorted(self.reach[p]):
                    self._add(("alpha_d", p, n, y))
            for a in range(A):
                self._add(("Q_ay", a, y))
                self._add(("X_ay", a, y))
                if not substitute_capacity:
                    self._add(("Cap_ay", a, y))
                self._add(("alpha_h", a, y))
                if not substitute_capacity:
                    self._add(("alpha_i", a, y))
            for c in range(C):
                self._add(("pi_cy", c, y))
            for a in range(A):
                self._add(("pi_ay", a, y))
        self.labels = tuple(self._label(model, k) for k in self.keys)

    def _add(self, key):
        if key in self._pos:
            raise AssemblyError(f"duplicate variable {key}")
        self._pos[key] = len(self.keys)
        self.keys.append(key)

    @staticmethod
    def _label(model, key):
        kind, *idx = key
        names = {
            "Q_pcy": (model.suppliers, model.consumers, model.years),
            "Q_pay": (model.suppliers, model.arcs, model.years),
            "alpha_d": (model.suppliers, model.nodes, model.years),
            "pi_cy": (model.consumers, model.years),
        }.get(kind)
        if names is None:
            first = model.arcs if kind in ("Q_ay", "X_ay", "Cap_ay", "alpha_h", "alpha_i", "pi_ay") else model.suppliers
            names = (first, model.years)
        return f"{kind}[{','.join(str(s[i]) for s, i in zip(names, idx))}]"

    def __len__(self):
        return len(self.keys)

    def __contains__(self, key):
        return key in self._pos

    def __getitem__(self, key) -> int:
        return self._pos[key]

    def get(self, key, default=None):
        return self._pos.get(key, default)

    def key_of(self, i: int):
        return self.keys[i]

    @property
    def cone_mask(self) -> np.ndarray:
        return np.array([k[0] in self.NONNEG for k in self.keys], dtype=bool)

    def indices(self, kind: str) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.keys) if k[0] == kind], dtype=int)


class ThetaIndex:
    """Flat layout of the random parameters: family-major, then entity, then year."""

    def __init__(self, model: GasMarketModel):
        self.keys = []
        self._pos = {}
        arrays = model.theta_arrays()
        values = []
        for fam in THETA_FAMILIES:
            arr = arrays[fam]
            for e in range(arr.shape[0]):
                for y in range(arr.shape[1]):
                    self._pos[(fam, e, y)] = len(self.keys)
                    self.keys.append((fam, e, y))
                    values.append(arr[e, y])
        self.mean = np.array(values)
        self.labels = tuple(f"{fam}[{model.entity_names(fam)[e]},{model.years[y]}]" for fam, e, y in self.keys)
        self.family = np.array([k[0] for k in self.keys])

    def __len__(self):
        return len(self.keys)

    def __getitem__(self, key) -> int:
        return self._pos[key]

    def family_indices(self, families) -> np.ndarray:
        families = (families,) if isinstance(families, str) else tuple(families)
        return np.flatnonzero(np.isin(self.family, families))


# -- assembly ---------------------------------------------------------

@dataclass
class _Terms:
    lin_r: list = field(default_factory=list)
    lin_c: list = field(default_factory=list)
    lin_v: list = field(default_factory=list)
    th_r: list = field(default_factory=list)
    th_k: list = field(default_factory=list)
    th_v: list = field(default_factory=list)
    bi_r: list = field(default_factory=list)
    bi_k: list = field(default_factory=list)
    bi_c: list = field(default_factory=list)
    bi_v: list = field(default_factory=list)
    const: Optional[np.ndarray] = None
    # Golombek units, one per (supplier, year)
    gq: list = field(default_factory=list)        # column of Q_py
    gcap_cols: list = field(default_factory=list)  # columns entering Cap_py
    gcap0: list = field(default_factory=list)     # constant part of Cap_py
    gg: list = field(default_factory=list)        # g coefficient
    gmc: list = field(default_factory=list)       # (row, coef) for -g·log(1 - q/cap)
    gcaprows: list = field(default_factory=list)  # [(row, coef)] for g·(log(1 - q/cap) + q/cap)

    def lin(self, r, c, v):
        self.lin_r.append(r)
        self.lin_c.append(c)
        self.lin_v.append(v)

    def th(self, r, k, v):
        self.th_r.append(r)
        self.th_k.append(k)
        self.th_v.append(v)

    def bi(self, r, k, c, v):
        self.bi_r.append(r)
        self.bi_k.append(k)
        self.bi_c.append(c)
        self.bi_v.append(v)

    def freeze(self):
        for nm in ("lin_r", "lin_c", "th_r", "th_k", "bi_r", "bi_k", "bi_c", "gq"):
            setattr(self, nm, np.asarray(getattr(self, nm), dtype=int))
        for nm in ("lin_v", "th_v", "bi_v", "gg", "gcap0"):
            setattr(self, nm, np.asarray(getattr(self, nm), dtype=float))


def _build_terms(model: GasMarketModel, ix: GasVariableIndex, tx: ThetaIndex) -> _Terms:
    P, C, N, A, Y = model.dims
    df = model.discount
    t = _Terms()
    t.const = np.zeros(len(ix))
    sub = ix.substitute_capacity

    def cap_p(p, y):
        if sub:
            return [ix[("X_py", p, i)] for i in range(y + 1)], model.cap0_p[p]
        return [ix[("Cap_py", p, y)]], 0.0

    def cap_a(a, y):
        if sub:
            return [ix[("X_ay", a, i)] for i in range(y + 1)], model.cap0_a[a]
        return [ix[("Cap_ay", a, y)]], 0.0

    for y in range(Y):
        for p in range(P):
            home = model.supplier_node[p]
            qpy = ix[("Q_py", p, y)]
            ab = ix[("alpha_b", p, y)]
            # stationarity in Q_pcy: -df·π_c + α_d(node of c)
            for c in ix.p_consumers[p]:
                r = ix[("Q_pcy", p, c, y)]
                t.lin(r, ix[("pi_cy", c, y)], -df[y])
                t.lin(r, ix[("alpha_d", p, model.consumer_node[c], y)], 1.0)
            # stationarity in Q_pay: df·π_a + α_d(from) - (1 - loss_a)·α_d(to)
            for a in ix.p_arcs[p]:
                r = ix[("Q_pay", p, a, y)]
                t.lin(r, ix[("pi_ay", a, y)], df[y])
                t.lin(r, ix[("alpha_d", p, model.arc_from[a], y)], 1.0)
                t.lin(r, ix[("alpha_d", p, model.arc_to[a], y)], -(1.0 - model.loss_a[a, y]))
            # stationarity in Q_py: df·MC + α_b - (1 - loss_p)·α_d(home)
            t.th(qpy, tx[("lin", p, y)], df[y])
            t.bi(qpy, tx[("quad", p, y)], qpy, 2.0 * df[y])
            t.lin(qpy, ab, 1.0)
            t.lin(qpy, ix[("alpha_d", p, home, y)], -(1.0 - model.loss_p[p, y]))
            cols, c0 = cap_p(p, y)
            t.gq.append(qpy)
            t.gcap_cols.append(cols)
            t.gcap0.append(c0)
            t.gg.append(model.glb[p, y])
            t.gmc.append((qpy, df[y]))
            if sub:
                t.gcaprows.append([(ix[("X_py", p, i)], df[y]) for i in range(y + 1)])
            else:
                t.gcaprows.append([(ix[("Cap_py", p, y)], df[y])])
            # stationarity in X_py
            rx = ix[("X_py", p, y)]
            t.th(rx, tx[("exp_price_p", p, y)], df[y])
            for i in range(y, Y):
                if sub:
                    t.lin(rx, ix[("alpha_b", p, i)], -model.avail[p])
                else:
                    t.lin(rx, ix[("alpha_c", p, i)], -1.0)
            if not sub:
                rc = ix[("Cap_py", p, y)]
                t.lin(rc, ix[("alpha_c", p, y)], 1.0)
                t.lin(rc, ab, -model.avail[p])
                # capacity accounting: Cap - Q0 - ΣX = 0
                racc = ix[("alpha_c", p, y)]
                t.lin(racc, rc, 1.0)
                for i in range(y + 1):
                    t.lin(racc, ix[("X_py", p, i)], -1.0)
                t.const[racc] -= model.cap0_p[p]
            # availability: avl·Cap - Q_py >= 0
            for col in cols:
                t.lin(ab, col, model.avail[p])
            t.const[ab] += model.avail[p] * c0
            t.lin(ab, qpy, -1.0)
            # nodal balance: inflow - outflow = 0 at every reachable node
            for n in sorted(ix.reach[p]):
                r = ix[("alpha_d", p, n, y)]
                if n == home:
                    t.lin(r, qpy, 1.0 - model.loss_p[p, y])
                for a in ix.p_arcs[p]:
                    if model.arc_to[a] == n:
                        t.lin(r, ix[("Q_pay", p, a, y)], 1.0 - model.loss_a[a, y])
                    if model.arc_from[a] == n:
                        t.lin(r, ix[("Q_pay", p, a, y)], -1.0)
                for c in ix.p_consumers[p]:
                    if model.consumer_node[c] == n:
                        t.lin(r, ix[("Q_pcy", p, c, y)], -1.0)
        for a in range(A):
            qa = ix[("Q_ay", a, y)]
            ah = ix[("alpha_h", a, y)]
            # stationarity in Q_ay: df·(cost_a - π_a) + α_h
            t.th(qa, tx[("arc_cost", a, y)], df[y])
            t.lin(qa, ix[("pi_ay", a, y)], -df[y])
            t.lin(qa, ah, 1.0)
            rx = ix[("X_ay", a, y)]
            t.th(rx, tx[("exp_price_a", a, y)], df[y])
            for i in range(y, Y):
                t.lin(rx, ix[("alpha_h", a, i)] if sub else ix[("alpha_i", a, i)], -1.0)
            cols, c0 = cap_a(a, y)
            if not sub:
                rc = ix[("Cap_ay", a, y)]
                t.lin(rc, ix[("alpha_i", a, y)], 1.0)
                t.lin(rc, ah, -1.0)
                racc = ix[("alpha_i", a, y)]
                t.lin(racc, rc, 1.0)
                for i in range(y + 1):
                    t.lin(racc, ix[("X_ay", a, i)], -1.0)
                t.const[racc] -= model.cap0_a[a]
            for col in cols:
                t.lin(ah, col, 1.0)
            t.const[ah] += c0
            t.lin(ah, qa, -1.0)
            # market clearing: Q_ay - Σ_p Q_pay = 0
            r = ix[("pi_ay", a, y)]
            t.lin(r, qa, 1.0)
            for p in range(P):
                if a in ix.p_arcs[p]:
                    t.lin(r, ix[("Q_pay", p, a, y)], -1.0)
        for c in range(C):
            # inverse demand: π_c - DemI - DemS·Σ_p Q_pcy = 0
            r = ix[("pi_cy", c, y)]
            t.lin(r, r, 1.0)
            t.th(r, tx[("dem_int", c, y)], -1.0)
            for p in range(P):
                if c in ix.p_consumers[p]:
                    t.bi(r, tx[("dem_slope", c, y)], ix[("Q_pcy", p, c, y)], -1.0)
    t.freeze()
    return t


class _Sink:
    """Accumulates (row, col, value) triplets either densely or into a SparseNdArray."""

    def __init__(self, shape, sparse: bool):
        self.sparse = sparse
        self.arr = SparseNdArray(shape) if sparse else np.zeros(shape)

    def add(self, rows, cols, vals):
        if self.sparse:
            for r, c, v in zip(np.ravel(rows), np.ravel(cols), np.ravel(vals)):
                self.arr.add_entry((int(r), int(c)), float(v))
        else:
            np.add.at(self.arr, (np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)), vals)

    def result(self) -> np.ndarray:
        if self.sparse:
            self.arr.remove_duplicates(combiner=sum, tol=0.0)
            return self.arr.to_dense()
        return self.arr


@dataclass
class GasSystem:
    """The assembled NCP together with its index maps."""

    model: GasMarketModel
    index: GasVariableIndex
    theta_index: ThetaIndex
    problem: ParametrizedNCP
    terms: _Terms = field(repr=False)

    def golombek_state(self, x):
        t = self.terms
        q = x[t.gq]
        cap = np.array([x[cols].sum() + c0 for cols, c0 in zip(t.gcap_cols, t.gcap0)])
        return q, cap

    def jacobians(self, x, theta, sparse: bool = True):
        """(G, L) assembled either through SparseNdArray or as a dense reference."""
        return _jacobians(self.terms, len(self.index), len(self.theta_index), x, theta, sparse)

    def split(self, x) -> dict:
        """Named view of a flat solution: {kind: {index tuple: value}}."""
        out: dict = {}
        for i, (kind, *idx) in enumerate(self.index.keys):
            out.setdefault(kind, {})[tuple(idx)] = float(x[i])
        return out

    def capacity(self, x):
        """Production capacity per (supplier, year) and arc capacity per (arc, year)."""
        m, ix = self.model, self.index
        P, C, N, A, Y = m.dims
        cp = np.zeros((P, Y))
        ca = np.zeros((A, Y))
        for p in range(P):
            for y in range(Y):
                cp[p, y] = (m.cap0_p[p] + sum(x[ix[("X_py", p, i)]] for i in range(y + 1))
                            if ix.substitute_capacity else x[ix[("Cap_py", p, y)]])
        for a in range(A):
            for y in range(Y):
                ca[a, y] = (m.cap0_a[a] + sum(x[ix[("X_ay", a, i)]] for i in range(y + 1))
                            if ix.substitute_capacity else x[ix[("Cap_ay", a, y)]])
        return cp, ca

    def residuals(self, x, theta=None) -> dict:
        """Max absolute violation of each equality family at ``x``."""
        m, ix = self.model, self.index
        P, C, N, A, Y = m.dims
        cp, ca = self.capacity(x)
        clearing = [abs(x[ix[("Q_ay", a, y)]] - sum(x[ix[("Q_pay", p, a, y)]] for p in range(P) if a in ix.p_arcs[p]))
                    for a in range(A) for y in range(Y)]
        accounting = [abs(cp[p, y] - m.cap0_p[p] - sum(x[ix[("X_py", p, i)]] for i in range(y + 1)))
                      for p in range(P) for y in range(Y)]
        accounting += [abs(ca[a, y] - m.cap0_a[a] - sum(x[ix[("X_ay", a, i)]] for i in range(y + 1)))
                       for a in range(A) for y in range(Y)]
        F = self.problem.F(x, theta)
        balance = np.abs(F[ix.indices("alpha_d")])
        demand = np.abs(F[ix.indices("pi_cy")])
        return {
            "market_clearing": float(max(clearing, default=0.0)),
            "capacity_accounting": float(max(accounting, default=0.0)),
            "nodal_balance": float(balance.max(initial=0.0)),
            "inverse_demand": float(demand.max(initial=0.0)),
        }

    def capacity_duals(self, x) -> np.ndarray:
        """Multipliers of the production capacity accounting, per (supplier, year).

        In the substituted formulation they are recovered from stationarity
        in capacity: α_c = avl·α_b - df·∂cost/∂Cap.
        """
        m, ix = self.model, self.index
        P, C, N, A, Y = m.dims
        if not ix.substitute_capacity:
            return np.array([[x[ix[("alpha_c", p, y)]] for y in range(Y)] for p in range(P)])
        cp, _ = self.capacity(x)
        out = np.zeros((P, Y))
        for p in range(P):
            for y in range(Y):
                q = x[ix[("Q_py", p, y)]]
                dc = golombek_cap_derivative(min(q, (1 - CAP_CLAMP) * cp[p, y]), cp[p, y], m.glb[p, y])
                out[p, y] = m.avail[p] * x[ix[("alpha_b", p, y)]] - m.discount[y] * dc
        return out

    def primal_and_price_indices(self) -> np.ndarray:
        """Coordinates that are physical quantities or prices (not multipliers)."""
        return np.array([i for i, k in enumerate(self.index.keys) if not k[0].startswith("alpha")], dtype=int)

    def wiener_covariance(self, cv: float = 0.01, families=THETA_FAMILIES) -> CovarianceModel:
        """Per-(family, entity) Brownian blocks across years, block diagonal overall."""
        m, tx = self.model, self.theta_index
        Y = len(m.years)
        blocks = []
        order = []
        fam_set = set(families)
        for fam in THETA_FAMILIES:
            arr = getattr(m, fam)
            names = m.entity_names(fam)
            for e in range(arr.shape[0]):
                ks = [tx[(fam, e, y)] for y in range(Y)]
                order.extend(ks)
                if fam not in fam_set:
                    blocks.append(np.zeros((Y, Y)))
                    continue
                scale = 1.0
                for vs in m.variance_scale:
                    if vs.entity == names[e] and fam in vs.families:
                        scale *= vs.factor
                blocks.append(wiener_covariance(np.abs(arr[e]), cv, m.times, scale))
        C = block_covariance(blocks).C
        # blocks were laid out in theta order already
        assert order == list(range(len(tx)))
        return CovarianceModel(C, tx.labels)


def _golombek_terms(t: _Terms, x):
    q = x[t.gq]
    cap = np.array([x[cols].sum() + c0 for cols, c0 in zip(t.gcap_cols, t.gcap0)])
    cap = np.maximum(cap, CAP_CLAMP)
    qe = np.minimum(q, (1.0 - CAP_CLAMP) * cap)
    g = t.gg
    logr = np.log1p(-qe / cap)
    gap = cap - qe
    return qe, cap, g, logr, gap


def _eval_F(t: _Terms, x, theta):
    F = t.const.copy()
    np.add.at(F, t.lin_r, t.lin_v * x[t.lin_c])
    np.add.at(F, t.th_r, t.th_v * theta[t.th_k])
    np.add.at(F, t.bi_r, t.bi_v * theta[t.bi_k] * x[t.bi_c])
    q, cap, g, logr, gap = _golombek_terms(t, x)
    for u, (row, coef) in enumerate(t.gmc):
        F[row] += coef * (-g[u] * logr[u])
    capterm = g * (logr + q / cap)
    for u, rows in enumerate(t.gcaprows):
        for row, coef in rows:
            F[row] += coef * capterm[u]
    return F


def _jacobians(t: _Terms, n, m, x, theta, sparse):
    G = _Sink((n, n), sparse)
    L = _Sink((n, m), sparse)
    G.add(t.lin_r, t.lin_c, t.lin_v)
    G.add(t.bi_r, t.bi_c, t.bi_v * theta[t.bi_k])
    L.add(t.th_r, t.th_k, t.th_v)
    L.add(t.bi_r, t.bi_k, t.bi_v * x[t.bi_c])
    q, cap, g, logr, gap = _golombek_terms(t, x)
    d_mc_dq = g / gap
    d_mc_dcap = -g * q / (cap * gap)
    d_cap_dq = d_mc_dcap
    d_cap_dcap = g * q ** 2 / (cap ** 2 * gap)
    for u, (row, coef) in enumerate(t.gmc):
        cols = t.gcap_cols[u]
        G.add([row], [t.gq[u]], [coef * d_mc_dq[u]])
        G.add([row] * len(cols), cols, [coef * d_mc_dcap[u]] * len(cols))
        for crow, ccoef in t.gcaprows[u]:
            G.add([crow], [t.gq[u]], [ccoef * d_cap_dq[u]])
            G.add([crow] * len(cols), cols, [ccoef * d_cap_dcap[u]] * len(cols))
    return G.result(), L.result()


def build_gas_market(model: GasMarketModel, substitute_capacity: bool = True,
                     sparse_assembly: bool = True) -> GasSystem:
    ix = GasVariableIndex(model, substitute_capacity)
    tx = ThetaIndex(model)
    t = _build_terms(model, ix, tx)
    n, m = len(ix), len(tx)

    def F(x, th):
        return _eval_F(t, x, th)

    def G(x, th):
        return _jacobians(t, n, m, x, th, sparse_assembly)[0]

    def L(x, th):
        return _jacobians(t, n, m, x, th, sparse_assembly)[1]

    problem = ParametrizedNCP(
        n=n, m=m, cone=ConeSpec.from_mask(ix.cone_mask), theta_mean=tx.mean,
        eval_F=F, eval_G=G, eval_L=L, var_labels=ix.labels, param_labels=tx.labels,
        name=model.name, x0=initial_point(model, ix),
    )
    return GasSystem(model, ix, tx, problem, t)


def initial_point(model: GasMarketModel, ix: GasVariableIndex) -> np.ndarray:
    """Start with existing capacities, half-utilised supply and demand-curve prices.

    Starting at zero capacity would put every Golombek term on its pole.
    """
    x = np.zeros(len(ix))
    for i, (kind, *idx) in enumerate(ix.keys):
        if kind == "Cap_py":
            x[i] = model.cap0_p[idx[0]]
        elif kind == "Cap_ay":
            x[i] = model.cap0_a[idx[0]]
        elif kind == "Q_py":
            x[i] = 0.5 * model.avail[idx[0]] * model.cap0_p[idx[0]]
        elif kind == "pi_cy":
            x[i] = 0.5 * model.dem_int[idx[0], idx[1]]
    return x


def make_gas_market(model: GasMarketModel, **kw) -> ParametrizedNCP:
    return build_gas_market(model, **kw).problem


def toy_model(elasticity: float = 0.29) -> GasMarketModel:
    """Synthetic 3-node, 2-supplier, 3-consumer, 2-arc, 2-year instance.

    All numbers are made up for testing; demand curves are calibrated to the
    requested point elasticity at reference (quantity, price) pairs.
    """
    ref = {"C0": (10.0, 30.0), "C1": (10.5, 25.0), "C2": (12.0, 45.0)}
    growth = np.array([1.0, 1.1])
    di = np.zeros((3, 2))
    ds = np.zeros((3, 2))
    for c, (price, qty) in enumerate(ref.values()):
        for y in range(2):
            di[c, y], ds[c, y] = calibrate_demand(price, qty * growth[y], elasticity)
    return GasMarketModel(
        name="toy-3node (synthetic)",
        nodes=("N0", "N1", "N2"),
        years=("Y1", "Y2"),
        suppliers=("S0", "S1"),
        supplier_node=(0, 1),
        consumers=tuple(ref),
        consumer_node=(0, 1, 2),
        arcs=("A02", "A12"),
        arc_from=(0, 1),
        arc_to=(2, 2),
        discount=np.array([1.0, 0.9]),
        avail=0.96,
        cap0_p=np.array([80.0, 70.0]),
        loss_p=0.01,
        lin=np.array([2.0, 2.5]),
        glb=np.array([1.0, 1.2]),
        quad=np.array([0.02, 0.03]),
        exp_price_p=np.array([8.0, 9.0]),
        cap0_a=np.array([25.0, 20.0]),
        loss_a=0.02,
        arc_cost=np.array([0.5, 0.6]),
        exp_price_a=np.array([3.0, 4.0]),
        dem_int=di,
        dem_slope=ds,
        units={"volume": "bcm/yr", "price": "USD/mcf"},
        variance_scale=[VarianceScale("S0", 5.0)],
    )
