"""Piecewise-linear KAN layers: convex (ICKAN) and unconstrained (P1-KAN)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .grid import (
    Lattice1D,
    locate_cells,
    locate_geometry,
    uniform_fractions,
    vertices_from_weights,
    widen_degenerate,
    _span,
)


def bind(p: Parameter | None, tape):
    if p is None:
        return None
    return tape.param(p) if tape is not None else p.value


def cell_geometry(x, vertices, cell):
    flat = np.asarray(vertices).ravel()
    base = np.arange(x.shape[1]) * vertices.shape[-1] + cell
    left = flat[base]
    delta = flat[base + 1] - left
    return left, delta, (x - left) / delta


def geometry(x, vertices, cell, geom=None):
    """``cell_geometry`` unless a precomputed ``(left, delta, t)`` is supplied."""
    return cell_geometry(x, vertices, cell) if geom is None else geom


def scatter_vertices(shape, cell, g_left, g_right):
    """Sum per-sample vertex adjoints into a (J, P+1) array."""
    J, Q = shape
    flat = np.arange(J) * Q + cell
    out = np.bincount(flat.ravel(), weights=g_left.ravel(), minlength=J * Q)
    out += np.bincount((flat + 1).ravel(), weights=g_right.ravel(), minlength=J * Q)
    return out.reshape(J, Q)


def _hat_vals_f(x, vertices, cell, extrapolate, geom=None):
    _, _, t = geometry(x, vertices, cell, geom)
    if not extrapolate:
        t = np.clip(t, 0.0, 1.0)
    return np.stack([1.0 - t, t], axis=-1)


@ad.register("hat_vals", _hat_vals_f)
def _hat_vals_b(g, out, x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    gt = g[..., 1] - g[..., 0]
    if not extrapolate:
        gt = gt * ((t >= 0.0) & (t <= 1.0))
    gx = gt / delta
    gv = scatter_vertices(vertices.shape, cell, gt * (t - 1.0) / delta, -gt * t / delta)
    return gx, gv


def _hat_slopes_f(x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    inv = 1.0 / delta
    if not extrapolate:
        inv = inv * ((t >= 0.0) & (t <= 1.0))
    return np.stack([-inv, inv], axis=-1)


@ad.register("hat_slopes", _hat_slopes_f)
def _hat_slopes_b(g, out, x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    gdelta = (g[..., 0] - g[..., 1]) / delta**2
    if not extrapolate:
        gdelta = gdelta * ((t >= 0.0) & (t <= 1.0))
    return None, scatter_vertices(vertices.shape, cell, -gdelta, gdelta)


def shape_values(x, lattice: Lattice1D, extrapolate: bool = False) -> np.ndarray:
    """Dense hat-function values ``Psi_0(x) .. Psi_P(x)``, shape (n, P+1)."""
    xa = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    v = lattice.vertices[None, :]
    cell, _ = locate_cells(xa, v)
    vals = _hat_vals_f(xa, v, cell, extrapolate)[:, 0, :]
    out = np.zeros((xa.shape[0], lattice.P + 1))
    rows = np.arange(xa.shape[0])
    out[rows, cell[:, 0]] = vals[:, 0]
    out[rows, cell[:, 0] + 1] += vals[:, 1]
    return out[0] if np.ndim(x) == 0 else out


def effective_slopes(bhat, d, first: bool):
    """Per-cell slopes ``slope(bhat) + sum_{i<=p} max(d_i, 0)``, shape (..., P)."""
    slope0 = bhat if first else ad.relu(bhat)
    inc = ad.cumsum(ad.relu(d), axis=-1)
    lead = np.shape(ad.value_of(bhat))
    zeros = np.zeros(lead + (1,))
    steps = ad.concat([zeros, inc], axis=-1)
    return ad.reshape(slope0, lead + (1,)) + steps


def convex_nodal_values(b, bhat, d, vertices, first: bool = True):
    """Nodal values of the convex piecewise-linear function on ``vertices``.

    ``b``/``bhat`` have shape (K, J), ``d`` (K, J, P-1), ``vertices`` (J, P+1);
    the result has shape (K, J, P+1).
    """
    slopes = effective_slopes(bhat, d, first)
    delta = vertices[..., 1:] - vertices[..., :-1]
    rise = ad.cumsum(slopes * delta, axis=-1)
    lead = np.shape(ad.value_of(b))
    return ad.reshape(b, lead + (1,)) + ad.concat([np.zeros(lead + (1,)), rise], axis=-1)


@dataclass
class LayerTrace:
    """What an input-gradient pass needs to revisit one layer."""

    x: object
    vertices: object
    cell: np.ndarray
    coef: object  # (K, J*Q)
    cols: np.ndarray  # (B, J*m)
    extrapolate: bool
    slope_kind: str
    out: object = None
    lower: object = None
    upper: object = None
    mask: np.ndarray | None = None  # active (unclipped) outputs
    geom: tuple | None = None  # cached (left, delta, t)


def layer_vjp(trace: LayerTrace, v):
    """Pull a cotangent ``v`` (B, K) on the layer output back to its input (B, J)."""
    if trace.mask is not None:
        v = v * trace.mask
    B, J = np.shape(ad.value_of(trace.x))
    dvals = ad.apply(
        trace.slope_kind,
        trace.x,
        trace.vertices,
        cell=trace.cell,
        extrapolate=trace.extrapolate,
        geom=trace.geom,
    )
    gathered = ad.take(v @ trace.coef, trace.cols)
    m = trace.cols.shape[1] // J
    return ad.asum(dvals * ad.reshape(gathered, (B, J, m)), axis=-1)


class _P1Base:
    """Lattice handling shared by the piecewise-linear layers."""

    def __init__(self, n_in, n_out, P, adapt, rng, name, random_grid=False):
        if P < 1:
            raise ValueError("P must be at least 1")
        self.n_in, self.n_out, self.P = n_in, n_out, P
        self.name = name
        self.raw = None
        if adapt:
            init = rng.uniform(-0.5, 0.5, (n_in, P)) if random_grid else np.zeros((n_in, P))
            self.raw = Parameter(f"{name}.raw", init)

    @property
    def adapt(self) -> bool:
        return self.raw is not None

    def lattice_vertices(self, lo, hi, tape=None):
        """Vertices (J, P+1) spanning the input box, widened if degenerate."""
        lo, hi = widen_degenerate(lo, hi)
        if self.raw is None:
            return _span(uniform_fractions(self.P)[None, :], lo, hi)
        return vertices_from_weights(bind(self.raw, tape), lo, hi)

    def _check_input(self, x):
        shape = np.shape(ad.value_of(x))
        if len(shape) != 2 or shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected input (B, {self.n_in}), got {shape}")

    def _contract(self, x, vertices, coef, extrapolate, vals_kind, slope_kind, width):
        xv = ad.value_of(x)
        B, J = xv.shape
        cell, left, delta, t = locate_geometry(xv, ad.value_of(vertices))
        geom = (left, delta, t)
        offsets = np.arange(J)[None, :, None] * width
        cols = (offsets + self._node_columns(cell, width)).reshape(B, -1)
        vals = ad.apply(vals_kind, x, vertices, cell=cell, extrapolate=extrapolate, geom=geom)
        vals = ad.reshape(vals, (B, -1))
        coef_flat = ad.reshape(coef, (self.n_out, J * width))
        y = ad.basis_contract(vals, coef_flat, cols)
        trace = LayerTrace(x, vertices, cell, coef_flat, cols, extrapolate, slope_kind, geom=geom)
        return y, trace

    @staticmethod
    def _node_columns(cell, width):
        return np.stack([cell, cell + 1], axis=-1)


class ConvexP1Layer(_P1Base):
    """Convex piecewise-linear KAN layer; non-first layers are also nondecreasing."""

    def __init__(self, n_in, n_out, P, first, adapt=False, rng=None, name="p1", random_grid=False):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(n_in, n_out, P, adapt, rng, name, random_grid)
        self.first = first
        self.b = Parameter(f"{name}.b", rng.uniform(-0.1, 0.1, (n_out, n_in)))
        self.bhat = Parameter(f"{name}.bhat", rng.uniform(0.0, 1.0 / n_in, (n_out, n_in)))
        self.d = Parameter(f"{name}.d", rng.uniform(0.0, 0.1 / P, (n_out, n_in, P - 1)))

    def parameters(self):
        ps = [self.b, self.bhat, self.d]
        return ps + ([self.raw] if self.raw is not None else [])

    def nodal_values(self, vertices, tape=None):
        return convex_nodal_values(
            bind(self.b, tape), bind(self.bhat, tape), bind(self.d, tape), vertices, self.first
        )

    def forward(self, x, lo, hi, tape=None, extrapolate=False):
        """Returns ``(y, lower, upper, trace)``; ``[lower, upper]`` is the exact image box."""
        self._check_input(x)
        vertices = self.lattice_vertices(lo, hi, tape)
        a = self.nodal_values(vertices, tape)
        y, trace = self._contract(
            x, vertices, a, extrapolate, "hat_vals", "hat_slopes", self.P + 1
        )
        lower = ad.asum(ad.amin(a, axis=-1), axis=-1)
        upper = ad.asum(ad.maximum(a[:, :, 0], a[:, :, -1]), axis=-1)
        trace.out, trace.lower, trace.upper = y, lower, upper
        return y, lower, upper, trace


class KanLayer(_P1Base):
    """Unconstrained P1-KAN layer with free nodal values."""

    def __init__(self, n_in, n_out, P, adapt=False, rng=None, name="kan", random_grid=False):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(n_in, n_out, P, adapt, rng, name, random_grid)
        ramp = uniform_fractions(P) - 0.5
        slope = rng.uniform(-1.0, 1.0, (n_out, n_in, 1)) / n_in
        init = rng.uniform(-0.1, 0.1, (n_out, n_in, 1)) + slope * ramp
        self.a = Parameter(f"{name}.a", init)

    def parameters(self):
        return [self.a] + ([self.raw] if self.raw is not None else [])

    def nodal_values(self, vertices=None, tape=None):
        return bind(self.a, tape)

    def forward(self, x, lo, hi, tape=None, extrapolate=False):
        self._check_input(x)
        vertices = self.lattice_vertices(lo, hi, tape)
        a = bind(self.a, tape)
        y, trace = self._contract(
            x, vertices, a, extrapolate, "hat_vals", "hat_slopes", self.P + 1
        )
        lower = ad.asum(ad.amin(a, axis=-1), axis=-1)
        upper = ad.asum(ad.amax(a, axis=-1), axis=-1)
        trace.out, trace.lower, trace.upper = y, lower, upper
        return y, lower, upper, trace


def p1_layer_forward(x, G_in, layer: ConvexP1Layer, tape=None, extrapolate=False):
    """Functional form: ``(y, (lower, upper))`` for a batch ``x`` inside ``G_in``."""
    y, lo, hi, _ = layer.forward(x, G_in.lower, G_in.upper, tape, extrapolate)
    return y, (lo, hi)


def kan_layer_forward(x, G_in, layer: KanLayer, tape=None, extrapolate=False):
    y, lo, hi, _ = layer.forward(x, G_in.lower, G_in.upper, tape, extrapolate)
    return y, (lo, hi)
