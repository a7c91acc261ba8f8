import numpy as np
import pytest

from ickan import autodiff as ad
from ickan.grid import (
    E_FLOOR,
    Hypercube,
    Lattice1D,
    hypercube_clamp,
    hypercube_contains,
    locate_cell,
    vertices_from_positive,
    vertices_from_weights,
    weights_for_positive,
)


def test_equal_weights_give_uniform_vertices():
    raw = weights_for_positive(np.ones(4))
    assert np.allclose(vertices_from_weights(raw, 0.0, 1.0), [0, 0.25, 0.5, 0.75, 1.0], atol=1e-12)


def test_ratio_formula():
    v = vertices_from_weights(weights_for_positive(np.array([1.0, 3.0])), 0.0, 1.0)
    assert v[1] == pytest.approx(0.25, abs=1e-12)


def test_scale_invariance():
    e = np.array([0.3, 1.7, 2.2, 0.9])
    assert np.allclose(vertices_from_positive(e, -1.0, 2.0), vertices_from_positive(2 * e, -1.0, 2.0),
                       rtol=0, atol=1e-12)


def test_softplus_floor_keeps_cells_open():
    raw = np.array([-200.0, 0.0, 50.0])
    v = vertices_from_weights(raw, 0.0, 1.0)
    gaps = np.diff(v)
    e = np.logaddexp(0, raw) + E_FLOOR
    assert np.all(gaps >= E_FLOOR / e.sum() - 1e-15)
    assert v[0] == 0.0 and v[-1] == 1.0


def test_vertices_reject_empty_interval():
    with pytest.raises(ValueError):
        vertices_from_weights(np.zeros(3), 1.0, 1.0)


def test_vertices_gradient_through_tape():
    raw = ad.Parameter("raw", np.array([0.2, -0.4, 0.7]))
    w = np.array([0.0, 1.0, -2.0, 0.0])
    tape = ad.Tape()
    out = ad.asum(vertices_from_weights(tape.param(raw), -1.0, 3.0) * w)
    g = ad.backward(tape, out)[raw]
    h = 1e-6
    for k in range(3):
        r = raw.value.copy()
        r[k] += h
        up = vertices_from_weights(r, -1.0, 3.0) @ w
        r[k] -= 2 * h
        down = vertices_from_weights(r, -1.0, 3.0) @ w
        assert g[k] == pytest.approx((up - down) / (2 * h), rel=1e-6)


@pytest.mark.parametrize("x, cell, t", [(0.5, 2, 0.0), (1.0, 3, 1.0), (-0.1, 0, -0.4), (1.2, 3, 1.8)])
def test_locate_cell_examples(x, cell, t):
    c, tt = locate_cell(x, Lattice1D(0.0, 1.0, 4))
    assert c == cell
    assert tt == pytest.approx(t, abs=1e-12)


def test_locate_cell_partitions_interval():
    rng = np.random.default_rng(0)
    lat = Lattice1D.random(-2.0, 3.0, 7, rng)
    v = lat.vertices
    x = np.concatenate([rng.uniform(-2, 3, 1000), v])
    cell, t = locate_cell(x, lat)
    inside = (x >= -2) & (x <= 3)
    assert np.all((t[inside] >= 0) & (t[inside] <= 1))
    assert np.allclose(v[cell] + t * (v[cell + 1] - v[cell]), x)
    # half-open cells: an interior vertex starts the next cell
    c, tt = locate_cell(v[3], lat)
    assert c == 3 and tt == 0.0


def test_lattice_validation():
    with pytest.raises(ValueError):
        Lattice1D(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        Lattice1D(1.0, 0.0, 3)
    assert np.allclose(Lattice1D(0.0, 1.0, 4, adaptive=True).vertices, np.linspace(0, 1, 5))


def test_hypercube_examples():
    box = Hypercube.cube(0.0, 1.0, 2)
    assert hypercube_contains(box, [0.5, 0.5])
    assert not hypercube_contains(box, [1.5, 0.5])
    assert np.array_equal(hypercube_clamp(box, [2.0, -1.0]), [1.0, 0.0])
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=3, size=(200, 2))
    once = box.clamp(pts)
    assert np.array_equal(box.clamp(once), once)


def test_hypercube_errors():
    with pytest.raises(ValueError):
        Hypercube([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError, match="dimension"):
        Hypercube.cube(0.0, 1.0, 2).contains([0.5, 0.5, 0.5])
