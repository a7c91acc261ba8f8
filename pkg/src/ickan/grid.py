"""One-dimensional lattices, cell location and hypercubes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad

# positivity floor added to softplus(raw); keeps every cell open during adaptation
E_FLOOR = 1e-3


def positive_weights(raw):
    return ad.softplus(raw) + E_FLOOR


def weights_for_positive(e) -> np.ndarray:
    """Raw weights whose positive transform equals ``e`` (each entry > E_FLOOR)."""
    e = np.asarray(e, dtype=float) - E_FLOOR
    if np.any(e <= 0):
        raise ValueError(f"positive weights must exceed the floor {E_FLOOR}")
    return e + np.log(-np.expm1(-e))


def fractions_from_positive(e):
    """Normalised cumulative sums ``(0, e1/S, (e1+e2)/S, ..., 1)`` along the last axis."""
    cs = ad.cumsum(e, axis=-1)
    frac = cs / cs[..., -1:]
    zeros = np.zeros(np.shape(ad.value_of(e))[:-1] + (1,))
    return ad.concat([zeros, frac], axis=-1)


def _column(v):
    shape = np.shape(ad.value_of(v))
    return ad.reshape(v, shape + (1,)) if shape else v


def _span(frac, lo, hi):
    lo, hi = _column(lo), _column(hi)
    # lo*(1-f) + hi*f hits both endpoints exactly
    return lo * (1.0 - frac) + hi * frac


def _check_interval(lo, hi):
    if np.any(ad.value_of(lo) >= ad.value_of(hi)):
        raise ValueError("lattice interval needs lo < hi")


def vertices_from_positive(e, lo, hi):
    _check_interval(lo, hi)
    return _span(fractions_from_positive(e), lo, hi)


def vertices_from_weights(raw, lo, hi):
    """Adaptive vertices ``lo + (hi-lo) * cumsum(e)/sum(e)`` with ``e = softplus(raw) + floor``.

    Works on arrays or tape variables; the last axis of ``raw`` has length P.
    """
    return vertices_from_positive(positive_weights(raw), lo, hi)


def uniform_fractions(P: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, P + 1)


def locate_cells(x: np.ndarray, vertices: np.ndarray):
    """Cell index and local coordinate for a batch.

    ``x`` has shape (B, J), ``vertices`` shape (J, P+1).  Cells are
    left-closed, the last one closed; points outside fall in the boundary
    cell with a local coordinate below 0 or above 1.
    """
    cell, _, _, t = locate_geometry(x, vertices)
    return cell, t


def locate_geometry(x: np.ndarray, vertices: np.ndarray):
    """``(cell, left, delta, t)`` with ``left``/``delta`` the cell's vertex and width."""
    x = np.ascontiguousarray(x, dtype=float)
    vertices = np.ascontiguousarray(vertices, dtype=float)
    if x.ndim != 2 or vertices.shape[0] != x.shape[1]:
        raise ValueError("expected x (B, J) and vertices (J, P+1)")
    return _kernels.locate_geometry(x, vertices)


@dataclass
class Lattice1D:
    """Vertices on ``[lo, hi]``; adaptive lattices derive them from raw weights."""

    lo: float
    hi: float
    P: int
    adaptive: bool = False
    raw: np.ndarray | None = None

    def __post_init__(self):
        if self.P < 1:
            raise ValueError("P must be at least 1")
        if not self.lo < self.hi:
            raise ValueError("lattice interval needs lo < hi")
        if self.adaptive and self.raw is None:
            self.raw = np.zeros(self.P)

    @classmethod
    def random(cls, lo, hi, P, rng):
        """Adaptive lattice with raw weights drawn from U(-0.5, 0.5)."""
        return cls(lo, hi, P, adaptive=True, raw=rng.uniform(-0.5, 0.5, P))

    @property
    def vertices(self) -> np.ndarray:
        if self.adaptive:
            return vertices_from_weights(np.asarray(self.raw, dtype=float), self.lo, self.hi)
        return _span(uniform_fractions(self.P), self.lo, self.hi)


def locate_cell(x, lattice: Lattice1D):
    """Scalar or 1-D version of :func:`locate_cells` on a single lattice."""
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    cell, t = locate_cells(xa[:, None], lattice.vertices[None, :])
    if np.ndim(x) == 0:
        return int(cell[0, 0]), float(t[0, 0])
    return cell[:, 0], t[:, 0]


@dataclass
class Hypercube:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound shapes differ")
        if np.any(self.lower > self.upper):
            raise ValueError("hypercube needs lower <= upper")

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int):
        return cls(np.full(dim, lo), np.full(dim, hi))

    @property
    def dim(self) -> int:
        return self.lower.size

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x.shape[-1]} != box dimension {self.dim}")
        return x

    def contains(self, x, tol: float = 0.0):
        x = self._check(x)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def clamp(self, x):
        return np.clip(self._check(x), self.lower, self.upper)

    def sample(self, rng, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def inflate(self, fraction: float) -> "Hypercube":
        pad = fraction * (self.upper - self.lower)
        return Hypercube(self.lower - pad, self.upper + pad)

    def to_list(self):
        return [self.lower.tolist(), self.upper.tolist()]


def hypercube_contains(box: Hypercube, x) -> bool:
    return bool(np.all(box.contains(x)))


def hypercube_clamp(box: Hypercube, x):
    return box.clamp(x)


def widen_degenerate(lo, hi, rel: float = 1e-6):
    """Pad near-degenerate intervals to ``[c - eps, c + eps]``, ``eps = rel * (1 + |c|)``.

    The pad is a constant, so gradients pass straight through to ``lo``/``hi``.
    """
    lov, hiv = ad.value_of(lo), ad.value_of(hi)
    mid = 0.5 * (lov + hiv)
    eps = rel * (1.0 + np.abs(mid))
    pad = np.where(hiv - lov < 2 * eps, eps - 0.5 * (hiv - lov), 0.0)
    if not np.any(pad):
        return lo, hi
    return lo - pad, hi + pad
