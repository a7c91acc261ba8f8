import numpy as np
import pytest

from ickan.grid import Hypercube
from ickan.networks import NetworkSpec, build_model
from ickan.training import (
    FitConfig,
    LQProblem,
    TrainingAborted,
    appendix_targets,
    kms_matrix,
    lq_cost_sample,
    lq_fit,
    lq_noise,
    lq_optimal_cost,
    mse_fit,
    riccati,
    target_partial,
    target_quadratic_kink,
    target_wrong_convexity,
)
from ickan.verify import midpoint_violation


def test_quadratic_kink_examples(rng):
    assert target_quadratic_kink([[0.0]], A=[[1.0]])[0] == 1.0
    assert target_quadratic_kink([[1.0]], A=[[1.0]])[0] == 2.0
    x = rng.uniform(-2, 2, (50, 3))
    # with A = I the kink part is symmetric about 1/2 and x^T x vs (1-x)^T(1-x) differ by 2 sum(x) - d
    lhs = target_quadratic_kink(x, A=np.eye(3)) - np.sum(x * x, axis=1)
    rhs = target_quadratic_kink(1 - x, A=np.eye(3)) - np.sum((1 - x) ** 2, axis=1)
    assert np.allclose(lhs, rhs)


def test_kms_matrix_is_positive_definite():
    for d in (1, 2, 5, 10):
        A = kms_matrix(d)
        assert np.allclose(A, A.T) and np.linalg.eigvalsh(A).min() > 0
    assert kms_matrix(3)[0, 2] == 0.25


def test_wrong_convexity_examples():
    assert target_wrong_convexity([[0.0]])[0] == 1.0
    assert target_wrong_convexity([[0.0, 0.0]])[0] == 1.0
    assert target_wrong_convexity([[1.0, 1.0]])[0] == pytest.approx(5.5)
    with pytest.raises(ValueError):
        target_wrong_convexity(np.zeros((1, 3)))


def test_partial_target(rng):
    assert target_partial(0.0, 0.0) == 0.0
    assert target_partial(1.0, 0.0) == 3.0
    assert np.array_equal(target_partial(np.array([[1.0, 0.0]])), [3.0])
    for xv in rng.uniform(-2, 2, 10):
        a = np.column_stack([np.full(200, xv), rng.uniform(-2, 2, 200)])
        b = np.column_stack([np.full(200, xv), rng.uniform(-2, 2, 200)])
        assert midpoint_violation(target_partial, a, b) <= 1e-12


def test_appendix_target_examples():
    assert appendix_targets(1, np.array([2.0]))[0] == 4.0
    assert appendix_targets(3, np.array([0.0]))[0] == 1.0
    assert appendix_targets(4, np.array([3.0]))[0] == 6.0
    assert appendix_targets(2, np.array([-1.0]))[0] == pytest.approx(1.0 + 10 * np.expm1(-1.0))
    with pytest.raises(ValueError):
        appendix_targets(5, np.zeros(1))


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(batch=0)
    with pytest.raises(ValueError):
        FitConfig(lr_final=0.0)
    cfg = FitConfig(iterations=11, lr=1.0, lr_final=0.01)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(10) == pytest.approx(0.01)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_affine_target_fit_and_kept_checkpoints(seed):
    # a single P1-ICKAN layer represents an affine target exactly
    box = Hypercube.cube(-1.0, 1.0, 2)
    model = build_model(NetworkSpec("p1", box, widths=(), P=5), np.random.default_rng(seed))
    target = lambda x: 0.7 * x[:, 0] - 1.3 * x[:, 1] + 0.2
    cfg = FitConfig(iterations=2000, batch=1000, lr=1e-2, eval_every=100, validation=20_000, selection=5000)
    model, res = mse_fit(model, target, box, cfg, rng=np.random.default_rng(seed + 10))
    assert res.val_mse <= 1e-6
    kept = [m for _, m in res.kept]
    assert all(a > b for a, b in zip(kept, kept[1:]))
    a, b = box.sample(np.random.default_rng(2), 1000), box.sample(np.random.default_rng(3), 1000)
    assert midpoint_violation(model.forward, a, b) <= 1e-8


def test_non_finite_streak_aborts():
    box = Hypercube.cube(0.0, 1.0, 1)
    model = build_model(NetworkSpec("p1", box, widths=(), P=3), np.random.default_rng(0))
    cfg = FitConfig(iterations=100, batch=8, max_bad_steps=5, validation=10, selection=10)
    with pytest.raises(TrainingAborted):
        mse_fit(model, lambda x: np.full(len(x), np.nan), box, cfg)


def test_lq_problem_validation():
    with pytest.raises(ValueError):
        LQProblem(Q=np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        LQProblem(R=-np.eye(2))


def test_riccati_identity_case():
    P, K, r = riccati(LQProblem(N=3))
    assert np.allclose(P[3], np.eye(2), atol=1e-12)
    assert np.allclose(P[2], 1.5 * np.eye(2), atol=1e-12)
    assert np.allclose(P[1], 1.6 * np.eye(2), atol=1e-12)
    assert np.allclose(P[0], (1.6 / 2.6 + 1.0) * np.eye(2), atol=1e-12)
    assert r[0] == pytest.approx(sum(np.trace(P[t + 1]) for t in range(3)), abs=1e-12)


def test_riccati_zero_cost_case():
    P, K, _ = riccati(LQProblem(Q=np.zeros((2, 2)), Qf=np.zeros((2, 2)), N=4))
    assert all(np.allclose(p, 0) for p in P) and all(np.allclose(k, 0) for k in K)


def test_lq_cost_sample_deterministic():
    prob = LQProblem()
    P, K, r = riccati(prob)
    zero = np.zeros((1, prob.N, 2))
    assert lq_cost_sample(np.zeros((1, 2)), zero, K, prob)[0] == 0.0
    x0 = np.array([[1.5, -2.0], [0.3, 0.1]])
    noiseless = lq_cost_sample(x0, np.zeros((2, prob.N, 2)), K, prob)
    assert np.allclose(noiseless, np.einsum("bi,ij,bj->b", x0, P[0], x0), rtol=1e-12)


def test_lq_monte_carlo_matches_riccati():
    prob = LQProblem(A=np.array([[1.0, 0.2], [0.0, 0.9]]), W=np.array([[1.0, 0.3], [0.3, 0.5]]))
    sol = riccati(prob)
    rng = np.random.default_rng(7)
    n = 100_000
    for x0 in prob.box.sample(rng, 5):
        costs = lq_cost_sample(np.tile(x0, (n, 1)), lq_noise(prob, rng, n), sol[1], prob)
        se = costs.std(ddof=1) / np.sqrt(n)
        assert abs(costs.mean() - lq_optimal_cost(prob, x0, sol)[0]) <= 3 * se


def test_lq_noise_covariance():
    prob = LQProblem(W=np.array([[2.0, 0.5], [0.5, 1.0]]))
    w = lq_noise(prob, np.random.default_rng(0), 200_000).reshape(-1, 2)
    assert np.allclose(np.cov(w.T), prob.W, atol=0.02)


def test_lq_fit_small_budget_schema():
    prob = LQProblem()
    model = build_model(NetworkSpec("p1", prob.box, widths=(4,), P=4), np.random.default_rng(0))
    cfg = FitConfig(iterations=50, batch=128, eval_every=25, validation=1000, selection=500)
    model, res = lq_fit(model, prob, cfg, rng=np.random.default_rng(0), grid_n=11)
    assert res.grid.shape == (121, 3)
    assert np.all(res.grid[:, 2] >= 0)
    assert res.r0 == pytest.approx(riccati(prob)[2][0])
