"""Coordinate-format sparse arrays of arbitrary rank.

Used to assemble the high-dimensional gradients of the market models
before they are flattened into ordinary 2-D Jacobians.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence, Union

import numpy as np
import scipy.sparse as sp

DEFAULT_FLUSH_TOL = 1e-5

Combiner = Union[Callable[[Sequence[float]], float], float, int]


class InvalidShapeError(ValueError):
    pass


class DuplicatePositionError(KeyError):
    """Raised when a position holds more than one stored value."""


class SparseNdArray:
    """N-dimensional array stored as a list of (position, value) pairs.

    ``set_entry`` overwrites an existing value; ``add_entry`` appends
    without checking and may therefore create duplicate positions, which
    must be resolved with ``remove_duplicates`` (or ``flush``) before
    ``get_entry`` is called on them.
    """

    def __init__(self, shape: Iterable[int]):
        shape = tuple(int(s) for s in shape)
        if len(shape) == 0 or any(s < 1 for s in shape):
            raise InvalidShapeError(f"all extents must be >= 1, got {shape}")
        self.shape = shape
        self._pos: list[tuple[int, ...]] = []
        self._val: list[float] = []

    # -- construction -------------------------------------------------
    @classmethod
    def from_dense(cls, arr, tol: float = 0.0) -> "SparseNdArray":
        arr = np.asarray(arr, dtype=float)
        out = cls(arr.shape)
        for idx in zip(*np.nonzero(np.abs(arr) > tol)):
            idx = tuple(int(i) for i in idx)
            out._pos.append(idx)
            out._val.append(float(arr[idx]))
        return out

    @classmethod
    def from_coords(cls, positions, values, shape=None) -> "SparseNdArray":
        """Build from an (nnz, rank) position matrix and a value vector.

        Without an explicit ``shape`` the smallest array holding every
        position is used.
        """
        positions = np.atleast_2d(np.asarray(positions, dtype=int))
        values = np.asarray(values, dtype=float).ravel()
        if positions.shape[0] != values.size:
            raise ValueError("positions and values differ in length")
        if shape is None:
            shape = tuple(int(s) + 1 for s in positions.max(axis=0))
        out = cls(shape)
        for p, v in zip(positions, values):
            out.add_entry(tuple(int(i) for i in p), float(v))
        return out

    def copy(self) -> "SparseNdArray":
        out = SparseNdArray(self.shape)
        out._pos = list(self._pos)
        out._val = list(self._val)
        return out

    # -- element access -----------------------------------------------
    @property
    def ndim(self) -> int:
        return len(self.shape)

    def _check(self, posn) -> tuple[int, ...]:
        posn = tuple(int(i) for i in posn)
        if len(posn) != self.ndim:
            raise IndexError(f"position {posn} has rank {len(posn)}, array has rank {self.ndim}")
        for i, (p, s) in enumerate(zip(posn, self.shape)):
            if not 0 <= p < s:
                raise IndexError(f"index {p} out of bounds for axis {i} with extent {s}")
        return posn

    def _matches(self, posn) -> list[int]:
        return [k for k, p in enumerate(self._pos) if p == posn]

    def set_entry(self, posn, val: float) -> "SparseNdArray":
        posn = self._check(posn)
        hits = self._matches(posn)
        if hits:
            self._val[hits[0]] = float(val)
            for k in reversed(hits[1:]):
                del self._pos[k]
                del self._val[k]
        else:
            self._pos.append(posn)
            self._val.append(float(val))
        return self

    def add_entry(self, posn, val: float) -> "SparseNdArray":
        self._pos.append(self._check(posn))
        self._val.append(float(val))
        return self

    def get_entry(self, posn) -> float:
        posn = self._check(posn)
        hits = self._matches(posn)
        if len(hits) > 1:
            raise DuplicatePositionError(
                f"{len(hits)} values stored at {posn}; call remove_duplicates first"
            )
        return self._val[hits[0]] if hits else 0.0

    def size(self) -> int:
        return len(self._val)

    # -- cleanup ------------------------------------------------------
    def remove_duplicates(self, posn=None, combiner: Combiner = sum, tol: float = 0.0) -> "SparseNdArray":
        """Collapse repeated positions into one entry.

        ``combiner`` is either a reduction over the list of stored values
        or a scalar that replaces them. With ``posn`` only that position
        is touched. Entries whose resulting magnitude is ``<= tol`` are
        dropped.
        """
        target = None if posn is None else self._check(posn)
        groups: dict[tuple[int, ...], list[float]] = {}
        order: list[tuple[int, ...]] = []
        for p, v in zip(self._pos, self._val):
            if p not in groups:
                groups[p] = []
                order.append(p)
            groups[p].append(v)
        pos, val = [], []
        for p in order:
            vals = groups[p]
            if target is not None and p != target:
                pos.extend([p] * len(vals))
                val.extend(vals)
                continue
            if len(vals) == 1:
                v = vals[0]
            elif callable(combiner):
                v = float(combiner(vals))
            else:
                v = float(combiner)
            if abs(v) > tol:
                pos.append(p)
                val.append(v)
        self._pos, self._val = pos, val
        return self

    def flush(self, tol: float = DEFAULT_FLUSH_TOL) -> "SparseNdArray":
        """Sum duplicates, then drop every entry with ``|value| <= tol``."""
        return self.remove_duplicates(combiner=sum, tol=tol)

    # -- transforms ---------------------------------------------------
    def swapaxes(self, axis1: int, axis2: int) -> "SparseNdArray":
        for ax in (axis1, axis2):
            if not -self.ndim <= ax < self.ndim:
                raise IndexError(f"axis {ax} out of range for rank {self.ndim}")
        axis1 %= self.ndim
        axis2 %= self.ndim
        perm = list(range(self.ndim))
        perm[axis1], perm[axis2] = perm[axis2], perm[axis1]
        out = SparseNdArray(tuple(self.shape[i] for i in perm))
        out._pos = [tuple(p[i] for i in perm) for p in self._pos]
        out._val = list(self._val)
        return out

    def to_dense(self) -> np.ndarray:
        """Materialise the array; duplicate positions are summed."""
        out = np.zeros(self.shape)
        if self._pos:
            idx = tuple(np.array(self._pos).T)
            np.add.at(out, idx, self._val)
        return out

    def to_scipy(self) -> sp.coo_matrix:
        if self.ndim != 2:
            raise ValueError("only rank-2 arrays convert to scipy matrices")
        if not self._pos:
            return sp.coo_matrix(self.shape)
        rows, cols = np.array(self._pos).T
        # scipy sums duplicates on conversion
        return sp.coo_matrix((np.array(self._val), (rows, cols)), shape=self.shape)

    def iterate(self) -> Iterator[tuple[tuple[int, ...], float]]:
        """Yield ``(position, value)`` in lexicographic position order."""
        order = sorted(range(len(self._pos)), key=lambda k: self._pos[k])
        for k in order:
            yield self._pos[k], self._val[k]

    # -- text dump ----------------------------------------------------
    def dumps(self) -> str:
        lines = ["# shape " + ",".join(str(s) for s in self.shape)]
        for p, v in self.iterate():
            lines.append(",".join(str(i) for i in p) + "\t" + repr(float(v)))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SparseNdArray":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# shape "):
            raise ValueError("missing '# shape' header line")
        out = cls(int(s) for s in lines[0][len("# shape "):].split(","))
        for n, ln in enumerate(lines[1:], start=2):
            try:
                posn, val = ln.split("\t")
                out.add_entry(tuple(int(i) for i in posn.split(",")), float(val))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"line {n}: {exc}") from exc
        return out

    def __repr__(self) -> str:
        return f"SparseNdArray(shape={self.shape}, stored={self.size()})"

    def __str__(self) -> str:
        return self.dumps()
