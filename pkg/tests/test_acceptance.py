"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

The desk-scale training criteria drive the command-line pipeline so that the
exact code path users run is the one being checked.  They take most of an
hour on one CPU core in total.
"""

import csv
import time

import numpy as np
import pytest

from ickan import cli
from ickan.grid import Hypercube
from ickan.networks import NetworkSpec, build_model, load_checkpoint
from ickan.training import (
    LQProblem,
    lq_cost_sample,
    lq_noise,
    lq_optimal_cost,
    riccati,
    target_wrong_convexity,
)
from ickan.transport import TransportProblem, uvp
from ickan.verify import (
    box_violation,
    gradient_loss,
    input_gradient_error,
    max_affine_error,
    midpoint_violation,
    parameter_gradient_error,
    random_pairs,
    random_spec,
)


def _run_cli(argv, out):
    t0 = time.perf_counter()
    code = cli.main(argv + ["--out", str(out)])
    assert code == 0, f"{argv} exited with {code}"
    with open(out / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows, time.perf_counter() - t0


def test_criterion_01_structural_convexity(acceptance_report):
    t0 = time.perf_counter()
    worst = {}
    for k, family in enumerate(("p1", "cubic", "icnn")):
        rng = np.random.default_rng(100 + k)
        worst[family] = 0.0
        for _ in range(50):
            model = build_model(random_spec(rng, family), rng)
            a, b = random_pairs(model.spec.domain, rng, 1000)
            worst[family] = max(worst[family], midpoint_violation(model.forward, a, b))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-8 and elapsed <= 120
    detail = ", ".join(f"{f} {v:.2e}" for f, v in worst.items())
    acceptance_report(1, ok, f"midpoint violation over 50 models/family ({detail}) <= 1e-8, {elapsed:.0f}s")
    assert ok


def test_criterion_02_gradients(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    param_worst = 0.0
    for family in ("p1", "cubic", "icnn"):
        for widths in ((), (4,), (4, 3)):
            if family == "icnn" and not widths:
                continue
            spec = NetworkSpec(family, Hypercube.cube(-1.0, 1.0, 2), widths=widths, P=5,
                               adapt=family != "icnn", random_grid=True)
            model = build_model(spec, rng)
            if family == "cubic":
                for layer in model.layers:
                    layer.g.value[...] = rng.normal(size=layer.g.value.shape)
            x = spec.domain.sample(rng, 16) * 0.9
            param_worst = max(param_worst, parameter_gradient_error(model, gradient_loss(model, x), rng))
    input_worst = 0.0
    for d in (1, 2, 4):
        spec = NetworkSpec("cubic", Hypercube.cube(-1.0, 1.0, d), widths=(5, 4), P=6, adapt=True,
                           random_grid=True)
        model = build_model(spec, rng)
        for layer in model.layers:
            layer.g.value[...] = rng.normal(size=layer.g.value.shape)
        input_worst = max(input_worst, input_gradient_error(model, spec.domain.sample(rng, 200) * 0.95))
    elapsed = time.perf_counter() - t0
    ok = param_worst <= 1e-4 and input_worst <= 1e-4 and elapsed <= 120
    acceptance_report(2, ok, f"parameter grad rel err {param_worst:.2e}, cubic input grad rel err "
                             f"{input_worst:.2e} (<= 1e-4), {elapsed:.0f}s")
    assert ok


def test_criterion_03_max_affine_oracle(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(300)
    errors = [max_affine_error(rng, 1 + trial % 3) for trial in range(20)]
    elapsed = time.perf_counter() - t0
    ok = max(errors) <= 1e-10 and elapsed <= 60
    acceptance_report(3, ok, f"max-affine sup error {max(errors):.2e} over 20 trials (<= 1e-10), {elapsed:.0f}s")
    assert ok


def test_criterion_04_box_soundness(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(400)
    worst = {"p1": 0.0, "cubic": 0.0}
    for k in range(20):
        family = "p1" if k % 2 == 0 else "cubic"
        model = build_model(random_spec(rng, family), rng)
        worst[family] = max(worst[family], box_violation(model, model.spec.domain.sample(rng, 10_000)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and elapsed <= 60
    acceptance_report(4, ok, f"box excursion p1 {worst['p1']:.2e}, cubic {worst['cubic']:.2e} (<= 1e-9), "
                             f"{elapsed:.0f}s")
    assert ok


def test_criterion_05_regression_desk_scale(acceptance_report, tmp_path):
    (tmp_path / "p1").mkdir()
    (tmp_path / "icnn").mkdir()
    p1, t_p1 = _run_cli(["fit", "--dim", "3", "--family", "p1", "--adapt", "--layers", "2",
                         "--neurons", "20", "--P", "20", "--iterations", "20000"], tmp_path / "p1")
    icnn, t_icnn = _run_cli(["fit", "--dim", "3", "--family", "icnn", "--layers", "2",
                             "--neurons", "320", "--iterations", "20000"], tmp_path / "icnn")
    mse_p1, mse_icnn = float(p1[0]["mse"]), float(icnn[0]["mse"])
    ok = mse_p1 <= 5e-3 and mse_icnn <= 5e-3 and max(t_p1, t_icnn) <= 900
    acceptance_report(5, ok, f"validation MSE P1-ICKAN-adapt {mse_p1:.2e} ({t_p1:.0f}s), ICNN {mse_icnn:.2e} "
                             f"({t_icnn:.0f}s) (<= 5e-3)")
    assert ok


@pytest.mark.xfail(strict=True, reason="in d=1 the best convex fit of a concave quadratic is affine and "
                                       "its error peaks at the edges; see the decisions ledger")
def test_criterion_06_wrong_convexity(acceptance_report, tmp_path):
    _, elapsed = _run_cli(["wrong-convexity", "--dim", "1", "--family", "p1", "--adapt"], tmp_path)
    model = load_checkpoint(tmp_path / "checkpoint_run0.json")
    rng = np.random.default_rng(600)
    a, b = random_pairs(model.spec.domain, rng, 1000)
    violation = midpoint_violation(model.forward, a, b)
    x = np.linspace(-2.0, 2.0, 401)[:, None]
    err = np.abs(model.forward(x) - target_wrong_convexity(x))
    center = float(np.mean(err[np.abs(x[:, 0]) <= 0.2]))
    edges = float(np.mean(err[np.abs(x[:, 0]) >= 1.8]))
    ok = violation <= 1e-8 and center >= 10.0 * edges and elapsed <= 300
    acceptance_report(6, ok, f"convexity violation {violation:.2e}; mean |error| center {center:.3f} vs "
                             f"edges {edges:.3f}, ratio {center / edges:.2f} (needs >= 10), {elapsed:.0f}s")
    assert ok


def test_criterion_07_lq(acceptance_report, tmp_path):
    P, _, _ = riccati(LQProblem(N=3))
    ric = max(float(np.max(np.abs(P[2] - 1.5 * np.eye(2)))), float(np.max(np.abs(P[1] - 1.6 * np.eye(2)))))

    prob = LQProblem()
    sol = riccati(prob)
    rng = np.random.default_rng(700)
    n = 100_000
    z_scores = []
    for x0 in prob.box.sample(rng, 5):
        costs = lq_cost_sample(np.tile(x0, (n, 1)), lq_noise(prob, rng, n), sol[1], prob)
        se = costs.std(ddof=1) / np.sqrt(n)
        z_scores.append(abs(costs.mean() - lq_optimal_cost(prob, x0, sol)[0]) / se)

    _, elapsed = _run_cli(["lq", "--iterations", "20000"], tmp_path)
    with open(tmp_path / "rel_error_grid_run0.csv", newline="") as fh:
        rel = max(float(row["rel_error"]) for row in csv.DictReader(fh))
    ok = ric <= 1e-12 and max(z_scores) <= 3.0 and rel <= 0.05 and elapsed <= 900
    acceptance_report(7, ok, f"riccati err {ric:.1e} (<= 1e-12); MC max |z| {max(z_scores):.2f} (<= 3); "
                             f"fitted max rel error {100 * rel:.2f}% (<= 5%), {elapsed:.0f}s")
    assert ok


def test_criterion_08_ot_identity(acceptance_report, tmp_path):
    rows, elapsed = _run_cli(["ot", "--benchmark", "identity", "--dim", "2", "--family", "cubic",
                              "--adapt", "--iterations", "3000"], tmp_path)
    best = float(rows[0]["best_uvp"])
    ok = best <= 0.5 and elapsed <= 1200
    acceptance_report(8, ok, f"identity best UVP {best:.4f}% (<= 0.5%), {elapsed:.0f}s")
    assert ok


def test_criterion_09_ot_tensorized(acceptance_report, tmp_path):
    best, linear, total = {}, None, 0.0
    for d in (1, 2):
        out = tmp_path / f"d{d}"
        out.mkdir()
        rows, elapsed = _run_cli(["ot", "--benchmark", "tensorized", "--dim", str(d), "--family", "cubic",
                                  "--adapt", "--P", "10", "--iterations", "3000",
                                  "--validation", str(2**14)], out)
        total += elapsed
        best[d] = float(rows[0]["best_uvp"])
        if d == 2:
            linear = float(rows[1]["best_uvp"])
    ok = max(best.values()) <= 1.0 and 0.3 <= linear <= 0.8 and total <= 2700
    acceptance_report(9, ok, f"best UVP d=1 {best[1]:.4f}%, d=2 {best[2]:.4f}% (<= 1%); linear d=2 "
                             f"{linear:.3f}% (in [0.3, 0.8]), {total:.0f}s")
    assert ok


def test_criterion_10_uvp_identities(acceptance_report):
    rng = np.random.default_rng(1000)
    exact, constant = [], []
    for d in (1, 2, 5):
        problem = TransportProblem.benchmark("tensorized", d)
        x = problem.sample_source(rng, 2**14)
        exact.append(uvp(problem.true_map, problem.true_map, x))
        mean = problem.sample_target(rng, 2**14).mean(axis=0)
        constant.append(uvp(lambda z, m=mean: np.tile(m, (len(z), 1)), problem.true_map, x))
    ok = max(exact) == 0.0 and all(abs(c - 100.0) <= 2.0 for c in constant)
    acceptance_report(10, ok, f"UVP(T*) {max(exact):.1e} (== 0); constant-mean UVP "
                              f"{', '.join(f'{c:.2f}' for c in constant)} (100 +- 2)")
    assert ok


def test_criterion_11_pickan(acceptance_report, tmp_path):
    # a 10x shorter budget than the reference runs; a larger step and denser
    # snapshot selection are the desk-scale settings (see the decisions ledger)
    rows, elapsed = _run_cli(["pickan-fit", "--layers", "2", "--neurons", "40", "--P", "40",
                              "--iterations", "20000", "--lr", "2e-3", "--eval-every", "200"], tmp_path)
    mse = float(rows[0]["mse"])
    model = load_checkpoint(tmp_path / "checkpoint_run0.json")
    rng = np.random.default_rng(1100)
    worst = 0.0
    for xv in np.linspace(-2.0, 2.0, 20):
        a, b = model.spec.domain.sample(rng, 500), model.spec.domain.sample(rng, 500)
        a[:, 0] = b[:, 0] = xv
        worst = max(worst, midpoint_violation(model.forward, a, b))
    ok = mse <= 1e-2 and worst <= 1e-8 and elapsed <= 900
    acceptance_report(11, ok, f"PICKAN MSE {mse:.2e} (<= 1e-2); convexity-in-y violation {worst:.2e} "
                              f"at 20 x values (<= 1e-8), {elapsed:.0f}s")
    assert ok
