"""Convex cubic-Hermite KAN layers.

Nodal derivatives are nondecreasing by construction, and each nodal value
increment is a sigmoid-gated point of the interval that keeps the Hermite
patch convex on its cell:

    a0[p+1] - a0[p] in [D/3 (2 a1[p] + a1[p+1]), D/3 (a1[p] + 2 a1[p+1])]

The increment uses the index order ``2 a1[i-1] + a1[i]`` at the lower end.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Parameter
from .layers_p1 import _P1Base, bind, geometry, scatter_vertices


def hermite_basis(t):
    """``(h00, h10, h01, h11)`` at ``t``."""
    t = np.asarray(t, dtype=float)
    t2, t3 = t * t, t * t * t
    return (2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + t, -2 * t3 + 3 * t2, t3 - t2)


def hermite_basis_d1(t):
    t = np.asarray(t, dtype=float)
    t2 = t * t
    return (6 * t2 - 6 * t, 3 * t2 - 4 * t + 1, -6 * t2 + 6 * t, 3 * t2 - 2 * t)


def hermite_basis_d2(t):
    t = np.asarray(t, dtype=float)
    return (12 * t - 6, 6 * t - 4, -12 * t + 6, 6 * t - 2)


def _c(a):
    return np.ascontiguousarray(a, dtype=float)


def _hermite_vals_f(x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    return _kernels.hermite_vals(_c(delta), _c(t), extrapolate)


@ad.register("hermite_vals", _hermite_vals_f)
def _hermite_vals_b(g, out, x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    gx, gl, gr = _kernels.hermite_vals_adjoint(_c(g), _c(delta), _c(t), extrapolate)
    return gx, scatter_vertices(vertices.shape, cell, gl, gr)


def _hermite_slopes_f(x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    return _kernels.hermite_slopes(_c(delta), _c(t), extrapolate)


@ad.register("hermite_slopes", _hermite_slopes_f)
def _hermite_slopes_b(g, out, x, vertices, cell, extrapolate, geom=None):
    _, delta, t = geometry(x, vertices, cell, geom)
    gx, gl, gr = _kernels.hermite_slopes_adjoint(_c(g), _c(delta), _c(t))
    return gx, scatter_vertices(vertices.shape, cell, gl, gr)


def cubic_nodal_values(b, bhat, d, g, vertices, first: bool = True):
    """Nodal values ``a0`` and derivatives ``a1``, each of shape (K, J, P+1)."""
    lead = np.shape(ad.value_of(b))
    zeros = np.zeros(lead + (1,))
    slope0 = bhat if first else ad.relu(bhat)
    a1 = ad.reshape(slope0, lead + (1,)) + ad.concat(
        [zeros, ad.cumsum(ad.relu(d), axis=-1)], axis=-1
    )
    delta = vertices[..., 1:] - vertices[..., :-1]
    lo, hi = a1[..., :-1], a1[..., 1:]
    inc = (delta * (1.0 / 3.0)) * (2.0 * lo + hi + ad.sigmoid(g) * (hi - lo))
    a0 = ad.reshape(b, lead + (1,)) + ad.concat([zeros, ad.cumsum(inc, axis=-1)], axis=-1)
    return a0, a1


class ConvexCubicLayer(_P1Base):
    """Convex cubic-Hermite KAN layer with output clipped at the image lower bound."""

    def __init__(self, n_in, n_out, P, first, adapt=False, rng=None, name="cubic", random_grid=False):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(n_in, n_out, P, adapt, rng, name, random_grid)
        self.first = first
        self.b = Parameter(f"{name}.b", rng.uniform(-0.1, 0.1, (n_out, n_in)))
        self.bhat = Parameter(f"{name}.bhat", rng.uniform(0.0, 1.0 / n_in, (n_out, n_in)))
        self.d = Parameter(f"{name}.d", rng.uniform(0.0, 0.1 / P, (n_out, n_in, P)))
        self.g = Parameter(f"{name}.g", np.zeros((n_out, n_in, P)))

    def parameters(self):
        ps = [self.b, self.bhat, self.d, self.g]
        return ps + ([self.raw] if self.raw is not None else [])

    @staticmethod
    def _node_columns(cell, width):
        Q = width // 2
        return np.stack([cell, cell + 1, Q + cell, Q + cell + 1], axis=-1)

    def nodal_values(self, vertices, tape=None):
        return cubic_nodal_values(
            bind(self.b, tape),
            bind(self.bhat, tape),
            bind(self.d, tape),
            bind(self.g, tape),
            vertices,
            self.first,
        )

    def forward(self, x, lo, hi, tape=None, extrapolate=False):
        """Returns ``(y, lower, upper, trace)`` with ``y >= lower`` after clipping."""
        self._check_input(x)
        vertices = self.lattice_vertices(lo, hi, tape)
        a0, a1 = self.nodal_values(vertices, tape)
        coef = ad.concat([a0, a1], axis=-1)
        y_hat, trace = self._contract(
            x, vertices, coef, extrapolate, "hermite_vals", "hermite_slopes", 2 * (self.P + 1)
        )
        lower = ad.asum(ad.amin(a0, axis=-1), axis=-1)
        upper = ad.asum(ad.maximum(a0[:, :, 0], a0[:, :, -1]), axis=-1)
        y = ad.maximum(y_hat, lower)
        trace.out, trace.lower, trace.upper = y, lower, upper
        trace.mask = ad.value_of(y_hat) >= ad.value_of(lower)
        return y, lower, upper, trace


def cubic_layer_forward(x, G_in, layer: ConvexCubicLayer, tape=None, extrapolate=False):
    y, lo, hi, _ = layer.forward(x, G_in.lower, G_in.upper, tape, extrapolate)
    return y, (lo, hi)
