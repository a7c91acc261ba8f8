"""Property checks shared by the ``verify`` command and the test-suite.

Every check takes an explicit seed so that a failure can be replayed.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .grid import Hypercube
from .networks import (
    ICKAN,
    NetworkSpec,
    build_model,
    construct_max_affine_p1,
    load_checkpoint,
    save_checkpoint,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seed: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} value={self.value:.3e}  tol={self.tolerance:.1e}  seed={self.seed}"


def midpoint_violation(f, points_a, points_b) -> float:
    """Largest ``f((a+b)/2) - (f(a)+f(b))/2`` over paired rows (<= 0 for convex f)."""
    mid = 0.5 * (points_a + points_b)
    return float(np.max(f(mid) - 0.5 * (f(points_a) + f(points_b))))


def random_pairs(domain: Hypercube, rng, n: int):
    return domain.sample(rng, n), domain.sample(rng, n)


def monotonicity_violation(grad, points_a, points_b) -> float:
    """Most negative ``(g(a) - g(b)) . (a - b)``, reported as a positive violation."""
    inner = np.sum((grad(points_a) - grad(points_b)) * (points_a - points_b), axis=1)
    return float(max(0.0, -inner.min()))


def box_violation(model: ICKAN, x) -> float:
    """Largest excursion of any intermediate output outside its threaded box."""
    _, traces = model.run(x)
    worst = 0.0
    for tr in traces:
        y = np.asarray(ad.value_of(tr.out))
        lo, hi = np.asarray(ad.value_of(tr.lower)), np.asarray(ad.value_of(tr.upper))
        worst = max(worst, float(np.max(lo - y)), float(np.max(y - hi)))
    return worst


def input_gradient_error(model, x, h: float = 1e-6) -> float:
    """Max relative error of the analytic input gradient against central differences."""
    g = model.input_gradient(x)
    fd = np.empty_like(g)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        fd[:, j] = (model.forward(x + e) - model.forward(x - e)) / (2 * h)
    return float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8))


def parameter_gradient_error(model, loss_fn, rng, entries: int = 6, h: float = 1e-6,
                             floor: float = 1e-4) -> float:
    """Worst relative error over parameter arrays of sampled gradient entries.

    ``loss_fn(tape)`` builds a scalar loss (on the tape when given, eagerly otherwise).
    Arrays whose gradient norm is below ``floor`` are compared against ``floor``,
    which keeps round-off in finite differences of exactly-zero gradients from
    dominating the ratio.
    """
    tape = ad.Tape()
    grads = ad.backward(tape, loss_fn(tape))
    worst = 0.0
    for p in model.parameters():
        g = grads.get(p, np.zeros_like(p.value))
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        fd = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn(None))
            flat[i] = old - h
            down = float(loss_fn(None))
            flat[i] = old
            fd[n] = (up - down) / (2 * h)
        an = g.reshape(-1)[idx]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an), floor)
        worst = max(worst, float(np.linalg.norm(an - fd) / scale))
    return worst


def gradient_loss(model, x):
    """A loss mixing values and input gradients, so both paths are exercised."""

    def loss(tape):
        value, grad = model.value_and_gradient(x, tape)
        return ad.mean(value) + ad.mean(ad.asum(grad * grad, axis=1))

    return loss


def random_affine_pair(rng, d: int):
    return rng.normal(size=d), rng.normal(), rng.normal(size=d), rng.normal()


def dense_grid(domain: Hypercube, per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(domain.lower, domain.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def max_affine_error(rng, d: int, per_axis: int | None = None) -> float:
    domain = Hypercube(-rng.uniform(0.5, 2.0, d), rng.uniform(0.5, 2.0, d))
    a1, b1, a2, b2 = random_affine_pair(rng, d)
    model = construct_max_affine_p1(a1, b1, a2, b2, domain)
    per_axis = per_axis or {1: 2001, 2: 101, 3: 31}.get(d, 11)
    x = dense_grid(domain, per_axis)
    exact = np.maximum(x @ a1 + b1, x @ a2 + b2)
    return float(np.max(np.abs(model.forward(x) - exact)))


def random_spec(rng, family: str) -> NetworkSpec:
    d = int(rng.choice([1, 2, 4]))
    depth = int(rng.integers(1, 4))
    widths = tuple(int(w) for w in rng.integers(2, 7, size=depth - 1))
    if family == "icnn":
        widths = tuple(int(w) for w in rng.integers(4, 17, size=depth))
    P = int(rng.choice([5, 10, 20]))
    lo = -rng.uniform(0.5, 3.0, d)
    hi = rng.uniform(0.5, 3.0, d)
    return NetworkSpec(family, Hypercube(lo, hi), widths=widths, P=P, adapt=bool(rng.integers(2)),
                       activation=str(rng.choice(["relu", "celu"])), random_grid=True)


def run_suite(seed: int = 0, checkpoint=None) -> list[CheckResult]:
    """Convexity, gradient, box and oracle checks on freshly seeded models."""
    results = []
    ss = np.random.SeedSequence(seed)
    for family in ("p1", "cubic", "icnn"):
        rng = np.random.default_rng(ss.spawn(1)[0])
        worst = 0.0
        for _ in range(10):
            model = build_model(random_spec(rng, family), rng)
            a, b = random_pairs(model.spec.domain, rng, 1000)
            worst = max(worst, midpoint_violation(model.forward, a, b))
        results.append(CheckResult(f"midpoint convexity [{family}]", worst <= 1e-8, worst, 1e-8, seed))

    rng = np.random.default_rng(ss.spawn(1)[0])
    worst = 0.0
    for family in ("p1", "cubic", "icnn"):
        spec = NetworkSpec(family, Hypercube.cube(-1.0, 1.0, 2), widths=(4, 3), P=5,
                           adapt=family != "icnn", random_grid=True)
        model = build_model(spec, rng)
        if family == "cubic":
            for layer in model.layers:
                layer.g.value[...] = rng.normal(size=layer.g.value.shape)
        x = spec.domain.sample(rng, 16) * 0.9
        worst = max(worst, parameter_gradient_error(model, gradient_loss(model, x), rng))
    results.append(CheckResult("parameter gradients vs finite differences", worst <= 1e-4, worst, 1e-4, seed))

    rng = np.random.default_rng(ss.spawn(1)[0])
    model = build_model(NetworkSpec("cubic", Hypercube.cube(-1.0, 1.0, 3), widths=(5, 4), P=6,
                                    adapt=True, random_grid=True), rng)
    err = input_gradient_error(model, model.spec.domain.sample(rng, 200) * 0.95)
    results.append(CheckResult("input gradient vs finite differences [cubic]", err <= 1e-4, err, 1e-4, seed))

    rng = np.random.default_rng(ss.spawn(1)[0])
    worst = 0.0
    for k in range(10):
        family = "p1" if k % 2 == 0 else "cubic"
        model = build_model(random_spec(rng, family), rng)
        worst = max(worst, box_violation(model, model.spec.domain.sample(rng, 10_000)))
    results.append(CheckResult("box soundness", worst <= 1e-9, worst, 1e-9, seed))

    rng = np.random.default_rng(ss.spawn(1)[0])
    worst = max(max_affine_error(rng, d) for d in (1, 2, 3) for _ in range(3))
    results.append(CheckResult("max-affine construction", worst <= 1e-10, worst, 1e-10, seed))

    rng = np.random.default_rng(ss.spawn(1)[0])
    spec = NetworkSpec("pickan", Hypercube.cube(-2.0, 2.0, 3), widths=(5, 5), P=5, n_x=1, random_grid=True)
    model = build_model(spec, rng)
    worst = 0.0
    for xv in rng.uniform(-2.0, 2.0, 5):
        a = spec.domain.sample(rng, 500)
        b = spec.domain.sample(rng, 500)
        a[:, 0] = b[:, 0] = xv
        worst = max(worst, midpoint_violation(model.forward, a, b))
    results.append(CheckResult("partial convexity in y [pickan]", worst <= 1e-8, worst, 1e-8, seed))

    if checkpoint is not None:
        loaded = load_checkpoint(checkpoint)
        a, b = random_pairs(loaded.spec.domain, rng, 1000)
        v = midpoint_violation(loaded.forward, a, b) if loaded.spec.family != "pickan" else 0.0
        results.append(CheckResult(f"checkpoint convexity [{checkpoint}]", v <= 1e-8, v, 1e-8, seed))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.json"
            save_checkpoint(model, path)
            again = load_checkpoint(path)
            x = spec.domain.sample(rng, 100)
            diff = float(np.max(np.abs(again.forward(x) - model.forward(x))))
        results.append(CheckResult("checkpoint round trip", diff == 0.0, diff, 0.0, seed))
    return results


def format_table(results) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
