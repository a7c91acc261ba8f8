"""Optimal transport with two convex potentials.

The inner potential ``psi`` receives source samples and its input gradient
is the estimated map ``T_hat = grad psi``; the outer potential ``phi``
scores the transported points against target samples.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import gaussian_kde

from . import autodiff as ad
from .autodiff import Adam
from .grid import Hypercube
from .training import TrainingAborted

log = logging.getLogger(__name__)


# -- benchmark maps ---------------------------------------------------------------


def tensorized_map(x) -> np.ndarray:
    """Componentwise ``x + 1 / (6 - cos(2 pi x)) - 0.2``."""
    x = np.asarray(x, dtype=float)
    return x + 1.0 / (6.0 - np.cos(2.0 * np.pi * x)) - 0.2


def product_potential(x):
    """``f(x) = 3^-d prod_i (x_i^2 + x_i + 1)`` and its gradient, row-wise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    q = x * x + x + 1.0
    f = np.prod(q, axis=1) / 3.0**d
    grad = np.empty_like(x)
    for k in range(d):
        others = np.prod(np.delete(q, k, axis=1), axis=1)
        grad[:, k] = (2.0 * x[:, k] + 1.0) * others / 3.0**d
    return f, grad


def product_map(x) -> np.ndarray:
    return product_potential(x)[1]


@dataclass
class TransportProblem:
    """Source sampler plus a known map; target samples are its pushforward."""

    d: int
    sample_source: Callable
    true_map: Callable | None = None
    name: str = "custom"

    def sample_target(self, rng, n: int) -> np.ndarray:
        x = self.sample_source(rng, n)
        return x if self.true_map is None else self.true_map(x)

    @classmethod
    def benchmark(cls, name: str, d: int) -> "TransportProblem":
        def uniform(rng, n):
            return rng.uniform(0.0, 1.0, (n, d))

        maps = {"identity": lambda x: np.array(x, dtype=float), "tensorized": tensorized_map,
                "product": product_map}
        if name not in maps:
            raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(maps)}")
        return cls(d, uniform, maps[name], name)


# -- metrics and baselines ----------------------------------------------------------


def batched_map(fn, x, chunk: int = 8192) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([fn(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def uvp(T_hat, T_star, x_mu, y_nu=None) -> float:
    """Percentage of unexplained variance of ``T_hat`` on source samples ``x_mu``.

    The denominator is the trace of the empirical covariance of ``y_nu``
    (by default the pushforward ``T_star(x_mu)``).
    """
    x_mu = np.asarray(x_mu, dtype=float)
    truth = batched_map(T_star, x_mu)
    est = truth if T_hat is T_star else batched_map(T_hat, x_mu)
    y = truth if y_nu is None else np.asarray(y_nu, dtype=float)
    var = np.mean(np.sum(y * y, axis=1)) - np.sum(np.mean(y, axis=0) ** 2)
    if var <= 0:
        raise ValueError("target samples have zero variance")
    return float(100.0 * np.mean(np.sum((truth - est) ** 2, axis=1)) / var)


def jacobi_eigh(S, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi rotations."""
    A = np.array(S, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12 * (1 + np.abs(A).max())):
        raise ValueError("matrix must be square and symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p, rot_q = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * rot_p - s * rot_q, s * rot_p + c * rot_q
                rot_p, rot_q = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * rot_p - s * rot_q, s * rot_p + c * rot_q
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(A).copy(), V


def sqrtm_psd(S) -> np.ndarray:
    """Symmetric square root; eigenvalues down to -1e-10 are clipped to zero."""
    w, V = jacobi_eigh(S)
    if w.min() < -1e-10 * max(1.0, np.abs(w).max()):
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _inv_sqrtm(S) -> np.ndarray:
    w, V = jacobi_eigh(S)
    return (V / np.sqrt(w)) @ V.T


@dataclass
class LinearMap:
    A: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.m1) @ self.A.T + self.m2


def _moments(z):
    m = z.mean(axis=0)
    return m, z.T @ z / len(z) - np.outer(m, m)


def linear_map_fit(x_mu, y_nu) -> LinearMap:
    """Gaussian (Bures) transport map between the empirical first two moments."""
    x_mu, y_nu = np.atleast_2d(x_mu), np.atleast_2d(y_nu)
    m1, S1 = _moments(x_mu)
    m2, S2 = _moments(y_nu)
    if np.linalg.eigvalsh(S1).min() <= 1e-12 * max(1.0, np.abs(S1).max()):
        log.warning("source covariance is singular; adding 1e-9 I")
        S1 = S1 + 1e-9 * np.eye(len(S1))
    R1 = sqrtm_psd(S1)
    R1inv = _inv_sqrtm(S1)
    A = R1inv @ sqrtm_psd(R1 @ S2 @ R1) @ R1inv
    return LinearMap(0.5 * (A + A.T), m1, m2)


# -- training ----------------------------------------------------------------------


@dataclass
class MinimaxConfig:
    I_ext: int = 3000
    I_int: int = 15
    batch: int = 1024
    lr: float = 1e-3
    eval_every: int = 100
    test_size: int = 4096
    validation: int = 2**14
    pilot: int = 2**14
    margin: float = 0.05
    pretrain_steps: int = 1000
    pretrain_lr: float = 1e-2
    seed: int = 0
    diverge_uvp: float = 1e4

    def __post_init__(self):
        for name in ("batch", "eval_every", "test_size", "validation", "pilot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.I_ext < 0 or self.I_int < 0 or self.lr < 0 or self.pretrain_steps < 0:
            raise ValueError("iteration counts and learning rates must be nonnegative")


@dataclass
class MinimaxResult:
    best_uvp: float
    final_uvp: float
    validation_uvp: float
    outer_iters: int
    trace: list = field(default_factory=list)  # (outer iteration, test uvp)
    wall_seconds: float = 0.0


def potential_domains(problem: TransportProblem, rng, pilot: int, margin: float):
    """Boxes for ``psi`` (source side) and ``phi`` (target side) from a pilot sample."""
    xs = problem.sample_source(rng, pilot)
    ys = problem.true_map(xs) if problem.true_map is not None else problem.sample_target(rng, pilot)
    boxes = []
    for z in (xs, ys):
        boxes.append(Hypercube(z.min(axis=0), z.max(axis=0)).inflate(margin))
    return boxes


def identity_pretrain(model, domain: Hypercube, steps: int, rng=None, lr: float = 1e-2,
                      batch: int = 1024) -> float:
    """Fit ``grad model`` to the identity on ``domain``; returns the final mean squared error."""
    rng = np.random.default_rng(rng)
    opt = Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        x = domain.sample(rng, batch)
        tape = ad.Tape()
        r = model.input_gradient(x, tape) - x
        loss = ad.mean(ad.asum(r * r, axis=1))
        ad.backward(tape, loss)
        opt.step()
        model.after_step()
    x = domain.sample(rng, 4 * batch)
    return float(np.mean(np.sum((model.input_gradient(x) - x) ** 2, axis=1)))


def transport_map(psi) -> Callable:
    return lambda x: psi.input_gradient(np.asarray(x, dtype=float))


def _objective(phi, psi, source, target, tape_phi, tape_psi, tape):
    """Mean of ``phi(grad psi(S)) - <S, grad psi(S)>`` minus mean ``phi(X)`` (if target given)."""
    grad = psi.input_gradient(source, tape if tape_psi else None)
    val = ad.mean(phi.forward(grad, tape if tape_phi else None) - ad.asum(grad * source, axis=1))
    if target is not None:
        val = val - ad.mean(phi.forward(target, tape if tape_phi else None))
    return val


def _snapshot(models):
    return [[p.value.copy() for p in m.parameters()] for m in models]


def _restore(models, snap):
    for m, vals in zip(models, snap):
        for p, v in zip(m.parameters(), vals):
            p.value[...] = v
        m.after_step()


def minimax_train(phi, psi, problem: TransportProblem, config: MinimaxConfig, rng=None):
    """Alternate ``I_int`` descent steps on ``psi`` with one ascent step on ``phi``.

    Every ``eval_every`` outer iterations the UVP of ``grad psi`` on a fixed
    test set is computed and the best (phi, psi) pair is kept.
    Returns ``(phi, psi, MinimaxResult)``.
    """
    if problem.true_map is None:
        raise ValueError("minimax_train evaluates UVP and needs a known map")
    rng = np.random.default_rng(config.seed if rng is None else rng)
    phi.extrapolate = True
    psi.extrapolate = True
    test_x = problem.sample_source(rng, config.test_size)
    opt_psi = Adam(psi.parameters(), lr=config.lr)
    opt_phi = Adam(phi.parameters(), lr=config.lr)
    best, best_snap = np.inf, None
    trace = []
    t0 = time.perf_counter()

    def evaluate(it):
        nonlocal best, best_snap
        score = uvp(transport_map(psi), problem.true_map, test_x)
        trace.append((it, score))
        if not np.isfinite(score) or score > config.diverge_uvp:
            raise TrainingAborted(f"UVP {score:.4g} at outer iteration {it}; trace {trace[-5:]}")
        if score < best:
            best, best_snap = score, _snapshot([phi, psi])

    evaluate(0)
    for it in range(1, config.I_ext + 1):
        for _ in range(config.I_int):
            s = problem.sample_source(rng, config.batch)
            tape = ad.Tape()
            loss = _objective(phi, psi, s, None, False, True, tape)
            ad.backward(tape, loss)
            opt_psi.step()
            psi.after_step()
        s = problem.sample_source(rng, config.batch)
        y = problem.sample_target(rng, config.batch)
        tape = ad.Tape()
        loss = -_objective(phi, psi, s, y, True, False, tape)
        ad.backward(tape, loss)
        opt_phi.step()
        phi.after_step()
        if it % config.eval_every == 0 or it == config.I_ext:
            evaluate(it)
    final = trace[-1][1]
    _restore([phi, psi], best_snap)
    val_x = problem.sample_source(rng, config.validation)
    val = uvp(transport_map(psi), problem.true_map, val_x)
    result = MinimaxResult(best, final, val, config.I_ext, trace, time.perf_counter() - t0)
    return phi, psi, result


# -- reports -------------------------------------------------------------------------


def marginal_report(samples: dict, bins: int = 50, grid_n: int = 200, path=None):
    """Histogram densities and Gaussian KDE (Scott bandwidth) for every marginal.

    ``samples`` maps a label to an (n, d) array.  Rows are
    ``(label, component, x, histogram, kde)``; written to ``path`` if given.
    """
    if not samples:
        raise ValueError("no samples given")
    arrays = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in samples.items()}
    for k, v in arrays.items():
        if v.size == 0 or len(v) < 2:
            raise ValueError(f"sample {k!r} is empty")
    d = next(iter(arrays.values())).shape[1]
    rows = []
    for comp in range(d):
        lo = min(v[:, comp].min() for v in arrays.values())
        hi = max(v[:, comp].max() for v in arrays.values())
        edges = np.linspace(lo, hi, bins + 1)
        centers = 0.5 * (edges[1:] + edges[:-1])
        for label, v in arrays.items():
            hist, _ = np.histogram(v[:, comp], bins=edges, density=True)
            kde = gaussian_kde(v[:, comp], bw_method="scott")(centers)
            rows.extend((label, comp, float(c), float(h), float(q)) for c, h, q in zip(centers, hist, kde))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "component", "x", "histogram", "kde"])
            w.writerows(rows)
    return rows


def map_slices(T_hat, T_star, d: int, n: int = 101, fixed: float = 0.5, path=None):
    """Component k of both maps along axis k, other coordinates held at ``fixed``."""
    rows = []
    t = np.linspace(0.0, 1.0, n)
    for k in range(d):
        x = np.full((n, d), fixed)
        x[:, k] = t
        truth, est = T_star(x)[:, k], T_hat(x)[:, k]
        rows.extend((k, float(a), float(b), float(c)) for a, b, c in zip(t, truth, est))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "x", "true", "estimate"])
            w.writerows(rows)
    return rows
