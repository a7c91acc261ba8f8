"""Regression targets, the MSE training loop and the linear-quadratic control problem."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam
from .grid import Hypercube

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


# -- targets --------------------------------------------------------------------


def kms_matrix(d: int, rho: float = 0.5) -> np.ndarray:
    """Kac-Murdock-Szego matrix ``rho**|i-j|``, positive definite for |rho| < 1."""
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def target_quadratic_kink(x, A=None) -> np.ndarray:
    """``sum_i (|x_i| + |1 - x_i|) + x^T A x`` row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    A = kms_matrix(x.shape[1]) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    kink = np.sum(np.abs(x) + np.abs(1.0 - x), axis=1)
    return kink + np.einsum("bi,ij,bj->b", x, A, x)


def wrong_convexity_Q(d: int) -> np.ndarray:
    if d == 1:
        return np.array([[-0.5]])
    if d == 2:
        return np.diag([1.0, -0.5])
    raise ValueError("the wrong-convexity target is defined for d in {1, 2}")


def target_wrong_convexity(x) -> np.ndarray:
    """``1 + 2 * sum(x) + x^T Q x`` with a Hessian that has a negative eigenvalue."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Q = wrong_convexity_Q(x.shape[1])
    return 1.0 + 2.0 * x.sum(axis=1) + np.einsum("bi,ij,bj->b", x, Q, x)


def target_partial(x, y=None) -> np.ndarray:
    """``|y + 1| * |x + 2 x^3|``; with one argument, columns are (x, y)."""
    if y is None:
        z = np.atleast_2d(np.asarray(x, dtype=float))
        x, y = z[:, 0], z[:, 1]
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return np.abs(y + 1.0) * np.abs(x + 2.0 * x**3)


def appendix_targets(i: int, x) -> np.ndarray:
    """One-dimensional test functions 1..4 (defined on [-10, 10])."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, 0]
    if i == 1:
        return x**2
    if i == 2:
        neg = np.expm1(np.minimum(x, 0.0))
        return x**2 + 10.0 * np.where(x < 0.0, neg, x)
    if i == 3:
        return (x**2 + 1.0) ** 2
    if i == 4:
        # printed form: the quadratic term carries no indicator
        return np.abs(x) * (np.abs(x) <= 3.0) + (x**2 - 3.0) / 2.0
    raise ValueError("appendix target index must be 1..4")


# -- MSE training ---------------------------------------------------------------


@dataclass
class FitConfig:
    batch: int = 1000
    iterations: int = 20_000
    lr: float = 1e-3
    seed: int = 0
    validation: int = 100_000
    eval_every: int = 1000
    selection: int = 10_000
    lr_final: float = 1.0
    keep_best: bool = True
    max_bad_steps: int = 50
    init_offset: bool = True

    def __post_init__(self):
        for name in ("batch", "iterations", "lr", "validation", "eval_every", "selection"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.lr_final <= 1.0:
            raise ValueError("lr_final is a multiplicative factor in (0, 1]")

    def lr_at(self, step: int) -> float:
        """Geometric decay from ``lr`` to ``lr * lr_final`` over the run."""
        frac = step / max(self.iterations - 1, 1)
        return self.lr * self.lr_final**frac


@dataclass
class FitResult:
    val_mse: float
    history: list = field(default_factory=list)  # (iteration, selection mse)
    kept: list = field(default_factory=list)  # (iteration, selection mse) of retained snapshots
    wall_seconds: float = 0.0
    skipped: int = 0


def predict(model, x, chunk: int = 20_000) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([model.forward(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def _snapshot(model):
    return [p.value.copy() for p in model.parameters()]


def _restore(model, snap):
    for p, v in zip(model.parameters(), snap):
        p.value[...] = v
    model.after_step()


def regress(model, sampler, config: FitConfig, rng, sel_x, sel_y):
    """Adam on the squared loss of batches drawn by ``sampler(rng, n) -> (x, y)``.

    With ``config.init_offset`` the output is first shifted so that its mean
    on the selection sample matches the targets.  Without it, a large
    constant misfit drives every slope increment ``d`` below zero in the
    first few hundred steps, where ``max(d, 0)`` stops passing gradient and
    each layer is stuck being affine.
    """
    if config.init_offset:
        model.shift_output(float(np.mean(sel_y) - np.mean(predict(model, sel_x))))
    opt = Adam(model.parameters(), lr=config.lr)
    history, kept = [], []
    best, best_snap = np.inf, None
    bad = 0
    t0 = time.perf_counter()
    for it in range(config.iterations):
        x, y = sampler(rng, config.batch)
        tape = ad.Tape()
        r = model.forward(x, tape) - y
        loss = ad.mean(r * r)
        if not np.isfinite(loss.value):
            bad += 1
            if bad > config.max_bad_steps:
                raise TrainingAborted(f"{bad} consecutive non-finite losses at iteration {it}")
            continue
        bad = 0
        ad.backward(tape, loss)
        opt.state.lr = config.lr_at(it)
        opt.step()
        model.after_step()
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            mse = float(np.mean((predict(model, sel_x) - sel_y) ** 2))
            history.append((it + 1, mse))
            if mse < best:
                best = mse
                kept.append((it + 1, mse))
                if config.keep_best:
                    best_snap = _snapshot(model)
    if config.keep_best and best_snap is not None:
        _restore(model, best_snap)
    return history, kept, time.perf_counter() - t0, opt.skipped


def mse_fit(model, target, domain: Hypercube, config: FitConfig, rng=None):
    """Train ``model`` on ``target`` with fresh uniform batches from ``domain``.

    Snapshots are compared on a selection sample at every evaluation; the
    reported validation MSE uses a separate held-out uniform sample.
    Returns ``(model, FitResult)``.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    sel_x = domain.sample(rng, config.selection)
    sel_y = target(sel_x)

    def sampler(r, n):
        x = domain.sample(r, n)
        return x, target(x)

    history, kept, wall, skipped = regress(model, sampler, config, rng, sel_x, sel_y)
    val_x = domain.sample(rng, config.validation)
    val = float(np.mean((predict(model, val_x) - target(val_x)) ** 2))
    return model, FitResult(val, history, kept, wall, skipped)


# -- linear-quadratic control -------------------------------------------------------


@dataclass
class LQProblem:
    A: np.ndarray = field(default_factory=lambda: np.eye(2))
    B: np.ndarray = field(default_factory=lambda: np.eye(2))
    Q: np.ndarray = field(default_factory=lambda: np.eye(2))
    R: np.ndarray = field(default_factory=lambda: np.eye(2))
    Qf: np.ndarray = field(default_factory=lambda: np.eye(2))
    W: np.ndarray = field(default_factory=lambda: np.eye(2))
    N: int = 5
    box: Hypercube = field(default_factory=lambda: Hypercube.cube(-3.0, 3.0, 2))

    def __post_init__(self):
        for name in ("A", "B", "Q", "R", "Qf", "W"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("Q", "R", "Qf", "W"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")


def riccati(problem: LQProblem):
    """Backward recursion: lists ``P[0..N]``, ``K[0..N-1]`` and ``r[0..N]``."""
    A, B, Q, R, W = problem.A, problem.B, problem.Q, problem.R, problem.W
    N = problem.N
    P = [None] * (N + 1)
    K = [None] * N
    r = [0.0] * (N + 1)
    P[N] = problem.Qf.copy()
    for t in range(N - 1, -1, -1):
        Pn = P[t + 1]
        S = B.T @ Pn @ B + R
        BPA = B.T @ Pn @ A
        try:
            gain = np.linalg.solve(S, BPA)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"R + B^T P B is singular at t={t}") from exc
        K[t] = -gain
        P[t] = A.T @ Pn @ A - BPA.T @ gain + Q
        P[t] = 0.5 * (P[t] + P[t].T)
        r[t] = r[t + 1] + float(np.trace(W @ Pn))
    return P, K, r


def lq_optimal_cost(problem: LQProblem, x0, solution=None) -> np.ndarray:
    P, _, r = solution or riccati(problem)
    x0 = np.atleast_2d(x0)
    return np.einsum("bi,ij,bj->b", x0, P[0], x0) + r[0]


def lq_noise(problem: LQProblem, rng, n: int) -> np.ndarray:
    """Draws ``w_t ~ N(0, W)``, shape (n, N, dim)."""
    w, V = np.linalg.eigh(problem.W)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, problem.N, len(problem.W)))
    return z @ L.T


def lq_cost_sample(x0, noise, gains, problem: LQProblem) -> np.ndarray:
    """Realised cost of the closed-loop trajectories started at ``x0`` (B, dim)."""
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    noise = np.asarray(noise, dtype=float).reshape(x.shape[0], problem.N, x.shape[1])
    cost = np.zeros(x.shape[0])
    for t in range(problem.N):
        u = x @ gains[t].T
        cost += np.einsum("bi,ij,bj->b", x, problem.Q, x) + np.einsum("bi,ij,bj->b", u, problem.R, u)
        x = x @ problem.A.T + u @ problem.B.T + noise[:, t]
    return cost + np.einsum("bi,ij,bj->b", x, problem.Qf, x)


@dataclass
class LQResult:
    fit: FitResult
    grid: np.ndarray  # rows (x1, x2, rel_error)
    max_rel_error: float
    value_at_origin: float
    r0: float


def lq_fit(model, problem: LQProblem, config: FitConfig, rng=None, grid_n: int = 61,
           noiseless: bool = False) -> tuple:
    """Regress ``model(x0)`` on sampled closed-loop costs; relative error on a grid.

    With ``noiseless=True`` the targets are the exact optimal costs instead of
    Monte-Carlo samples.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    sol = riccati(problem)
    _, K, r = sol
    box = problem.box

    def sampler(rr, n):
        x0 = box.sample(rr, n)
        if noiseless:
            return x0, lq_optimal_cost(problem, x0, sol)
        return x0, lq_cost_sample(x0, lq_noise(problem, rr, n), K, problem)

    # snapshots are selected on sampled costs, never on the exact value function
    sel_x, sel_y = sampler(rng, config.selection)
    history, kept, wall, skipped = regress(model, sampler, config, rng, sel_x, sel_y)
    val_x = box.sample(rng, config.validation)
    val = float(np.mean((predict(model, val_x) - lq_optimal_cost(problem, val_x, sol)) ** 2))

    g1 = np.linspace(box.lower[0], box.upper[0], grid_n)
    g2 = np.linspace(box.lower[1], box.upper[1], grid_n)
    X1, X2 = np.meshgrid(g1, g2, indexing="ij")
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    exact = lq_optimal_cost(problem, pts, sol)
    rel = np.abs(predict(model, pts) - exact) / exact
    grid = np.column_stack([pts, rel])
    v0 = float(model.forward(np.zeros((1, 2)))[0])
    fit = FitResult(val, history, kept, wall, skipped)
    return model, LQResult(fit, grid, float(rel.max()), v0, float(r[0]))
