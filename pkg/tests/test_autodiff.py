import gc
import weakref

import numpy as np
import pytest

from ickan import autodiff as ad
from ickan.autodiff import Adam, AdamState, Parameter, Tape, adam_step, backward


def scalar_grad(build, value):
    p = Parameter("p", value)
    tape = Tape()
    out = build(tape.param(p))
    grads = backward(tape, out)
    return out.value, grads[p]


def test_record_examples():
    tape = Tape()
    a, b = tape.const(2.0), tape.const(3.0)
    assert tape.record("mul", [a, b]).value == 6.0
    assert tape.record("relu", [tape.const(-1.0)]).value == 0.0
    assert tape.record("sigmoid", [tape.const(0.0)]).value == 0.5


def test_record_errors():
    tape = Tape()
    with pytest.raises(ValueError, match="unknown op"):
        tape.record("frobnicate", [tape.const(1.0)])
    with pytest.raises(ValueError):
        tape.record("add", [tape.const(np.ones(2)), tape.const(np.ones(3))])
    other = Tape()
    with pytest.raises(ValueError, match="this tape"):
        tape.record("neg", [other.const(1.0)])


def test_parents_precede_children():
    tape = Tape()
    x = tape.const(np.arange(3.0))
    y = ad.asum(ad.relu(x * x - 1.0))
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.parents)
    assert y.index == len(tape) - 1


def test_backward_examples():
    assert scalar_grad(lambda p: p * p, 3.0)[1] == 6.0
    assert scalar_grad(lambda p: ad.relu(p), 0.0)[1] == 0.0
    assert scalar_grad(lambda p: ad.sigmoid(p), 0.0)[1] == 0.25


def test_max_routes_ties_to_first_argument():
    a, b = Parameter("a", 1.0), Parameter("b", 1.0)
    tape = Tape()
    backward(tape, ad.maximum(tape.param(a), tape.param(b)))
    assert (a.grad, b.grad) == (1.0, 0.0)
    tape = Tape()
    backward(tape, ad.minimum(tape.param(a), tape.param(b)))
    assert (a.grad, b.grad) == (1.0, 0.0)


def test_backward_needs_scalar():
    tape = Tape()
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, tape.const(np.ones(2)) * 2.0)


def _smooth_graph(tape, x, w):
    h = ad.sigmoid(ad.matmul(x, w))
    h = ad.power(h, 3) + ad.softplus(h) * ad.exp(-h) - ad.div(h, 2.0 + h)
    z = ad.affine([h, ad.cumsum(h, axis=-1)], coeffs=[0.7, -0.2], const=0.1)
    return ad.asum(z * z) + ad.dot(ad.asum(h, axis=0), ad.amax(w, axis=0))


def test_smooth_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Parameter("x", rng.normal(size=(4, 3)))
    w = Parameter("w", rng.normal(size=(3, 5)))

    def loss(tape=None):
        if tape is None:
            return float(_smooth_graph(Tape(), Tape().const(x.value), w.value).value)
        return _smooth_graph(tape, tape.param(x), tape.param(w))

    tape = Tape()
    grads = backward(tape, loss(tape))
    h = 1e-5
    for p in (x, w):
        fd = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + h
            up = loss()
            p.value[idx] = old - h
            down = loss()
            p.value[idx] = old
            fd[idx] = (up - down) / (2 * h)
        rel = np.linalg.norm(grads[p] - fd) / np.linalg.norm(fd)
        assert rel <= 1e-5


def test_sweeping_twice_gives_identical_adjoints():
    rng = np.random.default_rng(0)
    w = Parameter("w", rng.normal(size=(3, 3)))
    tape = Tape()
    out = ad.asum(ad.sigmoid(tape.param(w) @ tape.param(w)))
    first = backward(tape, out)[w].copy()
    second = backward(tape, out)[w]
    assert np.array_equal(first, second)


def test_contract_and_take_gradients():
    rng = np.random.default_rng(1)
    vals = Parameter("vals", rng.normal(size=(5, 4)))
    coef = Parameter("coef", rng.normal(size=(3, 7)))
    cols = rng.integers(0, 7, size=(5, 4))
    idx = rng.integers(0, 3, size=(5, 2))

    def loss(tape):
        v = tape.param(vals) if tape is not None else vals.value
        c = tape.param(coef) if tape is not None else coef.value
        y = ad.basis_contract(v, c, cols)
        return ad.asum(ad.take(y * y, idx))

    dense = np.zeros((5, 3))
    for b in range(5):
        for m in range(4):
            dense[b] += vals.value[b, m] * coef.value[:, cols[b, m]]
    assert np.allclose(ad.basis_contract(vals.value, coef.value, cols), dense)

    tape = Tape()
    grads = backward(tape, loss(tape))
    h = 1e-6
    for p in (vals, coef):
        for idx_ in [(0, 0), (1, 2), (2, 3)]:
            old = p.value[idx_]
            p.value[idx_] = old + h
            up = float(loss(None))
            p.value[idx_] = old - h
            down = float(loss(None))
            p.value[idx_] = old
            assert grads[p][idx_] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_adam_single_step():
    # hand evaluation: m_hat = g = 1, v_hat = g^2 = 1, step = lr / (1 + eps)
    p = Parameter("p", 0.0)
    p.grad = np.array(1.0)
    state = AdamState(lr=1e-3)
    assert adam_step([p], state)
    assert p.value == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)
    assert state.t == 1
    assert p.grad == 0.0


def test_adam_zero_gradient_and_zero_lr():
    p = Parameter("p", [1.0, -2.0])
    opt = Adam([p], lr=1e-3)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.value, [1.0, -2.0])
    q = Parameter("q", [0.5])
    opt = Adam([q], lr=0.0)
    for g in (1.0, -3.0, 2.0):
        q.grad = np.array([g])
        opt.step()
    assert q.value[0] == 0.5


def test_adam_two_steps_monotone():
    p = Parameter("p", 0.0)
    opt = Adam([p], lr=1e-3)
    seen = [float(p.value)]
    for _ in range(2):
        p.grad = np.array(1.0)
        opt.step()
        seen.append(float(p.value))
    assert seen[0] > seen[1] > seen[2]
    # with a constant gradient every bias-corrected step has size lr / (1 + eps)
    assert seen[2] == pytest.approx(-2e-3, rel=1e-6)


def test_adam_skips_non_finite_gradient():
    p = Parameter("p", [1.0, 2.0])
    opt = Adam([p], lr=1e-2)
    p.grad = np.array([np.nan, 1.0])
    assert not opt.step()
    assert opt.skipped == 1 and opt.state.t == 0
    assert np.array_equal(p.value, [1.0, 2.0])
    assert np.all(p.grad == 0.0)


def test_tape_is_freed_without_cycle_collection():
    # tapes hold large intermediate arrays; they must not wait for the cyclic GC
    p = Parameter("w", np.ones(3))
    gc.disable()
    try:
        tape = Tape()
        loss = ad.asum(tape.param(p) * tape.param(p))
        backward(tape, loss)
        ref = weakref.ref(tape)
        del tape, loss
        assert ref() is None
    finally:
        gc.enable()
