"""Command-line experiment runner.

Every experiment writes ``results.csv``, a ``manifest.json`` (configuration
echo plus content hashes of the saved checkpoints) and JSON checkpoints into
``--out``.  Runs are seeded from ``(seed, run index, experiment id)``
through numpy's ``SeedSequence`` feeding a PCG64 generator.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .grid import Hypercube
from .networks import CheckpointError, NetworkSpec, build_model, construct_max_affine_p1, save_checkpoint
from .training import (
    FitConfig,
    LQProblem,
    TrainingAborted,
    appendix_targets,
    lq_fit,
    mse_fit,
    target_partial,
    target_quadratic_kink,
    target_wrong_convexity,
)
from .transport import (
    MinimaxConfig,
    TransportProblem,
    identity_pretrain,
    linear_map_fit,
    map_slices,
    marginal_report,
    minimax_train,
    potential_domains,
    transport_map,
    uvp,
)
from .verify import dense_grid, format_table, random_affine_pair, run_suite

log = logging.getLogger("ickan")

EXPERIMENTS = ("fit", "wrong-convexity", "lq", "pickan-fit", "ot", "appendix-1d", "oracle-maxaffine", "verify")

FIT_COLUMNS = ["method", "layers", "neurons", "P", "run", "iterations", "mse", "wall_seconds"]
OT_COLUMNS = ["benchmark", "method", "d", "P", "neurons", "run", "best_uvp", "final_uvp", "outer_iters"]


class ConfigError(ValueError):
    pass


def make_rng(seed: int, run: int, experiment: str) -> np.random.Generator:
    """PCG64 stream keyed by ``(seed, run, crc32(experiment))``."""
    ss = np.random.SeedSequence([seed, run, zlib.crc32(experiment.encode())])
    return np.random.Generator(np.random.PCG64(ss))


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def method_name(family: str, adapt: bool) -> str:
    base = {"p1": "P1-ICKAN", "cubic": "Cubic-ICKAN", "icnn": "ICNN", "pickan": "PICKAN", "kan": "P1-KAN"}[family]
    return base + ("-adapt" if adapt and family not in ("icnn",) else "")


# -- argument handling ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ickan", description="Convex KAN experiments")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--dim", type=int, default=None, help="input dimension")
    parser.add_argument("--family", default=None, help="p1 | cubic | icnn | pickan | kan")
    parser.add_argument("--adapt", action="store_true", help="trainable lattice vertices")
    parser.add_argument("--layers", type=int, default=None, help="number of hidden layers")
    parser.add_argument("--neurons", type=int, default=None, help="neurons per hidden layer")
    parser.add_argument("--P", type=int, default=None, help="cells per lattice")
    parser.add_argument("--runs", type=int, default=1)
    parser.add_argument("--iterations", type=int, default=None, help="Adam steps (outer steps for ot)")
    parser.add_argument("--inner", type=int, default=15, help="inner steps per outer step (ot)")
    parser.add_argument("--pretrain", type=int, default=1000, help="identity pretraining steps (ot)")
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--lr-final", type=float, default=1.0, help="final learning-rate factor")
    parser.add_argument("--validation", type=int, default=None)
    parser.add_argument("--eval-every", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="results")
    parser.add_argument("--config", default=None, help="key=value file overriding flags")
    parser.add_argument("--parallel", action="store_true", help="run independent runs concurrently")
    parser.add_argument("--benchmark", default="tensorized", help="identity | tensorized | product")
    parser.add_argument("--trials", type=int, default=20)
    parser.add_argument("--checkpoint", default=None, help="checkpoint to check (verify)")
    return parser


def apply_config_file(args: argparse.Namespace, path) -> argparse.Namespace:
    """Override parsed flags with ``key=value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if not hasattr(args, key) or key in ("experiment", "config"):
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        current = getattr(args, key)
        setattr(args, key, _coerce(value, current, key))
    return args


_INT_KEYS = {"dim", "layers", "neurons", "P", "runs", "iterations", "inner", "pretrain", "batch",
             "validation", "eval_every", "seed", "trials"}
_FLOAT_KEYS = {"lr", "lr_final"}


def _coerce(value: str, current, key: str):
    if isinstance(current, bool) or key in ("adapt", "parallel"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return value


DEFAULTS = {
    "fit": dict(dim=3, family="p1", layers=2, neurons=20, P=20, iterations=20_000, batch=1000),
    "wrong-convexity": dict(dim=1, family="p1", layers=2, neurons=10, P=10, iterations=20_000, batch=1000),
    "lq": dict(dim=2, family="p1", layers=2, neurons=10, P=10, iterations=20_000, batch=1000),
    "pickan-fit": dict(dim=2, family="pickan", layers=2, neurons=40, P=40, iterations=20_000, batch=1000),
    "ot": dict(dim=2, family="cubic", P=10, iterations=3000, batch=1024),
    "appendix-1d": dict(dim=1, family="p1", layers=0, neurons=1, P=10, iterations=20_000, batch=1000),
    "oracle-maxaffine": dict(dim=2),
    "verify": dict(),
}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill experiment-specific defaults and validate."""
    for key, value in DEFAULTS[args.experiment].items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    if args.experiment == "ot":
        d = args.dim
        if args.layers is None:
            args.layers = 3 if args.family == "icnn" else 2
        if args.neurons is None:
            args.neurons = 64 if args.family == "icnn" else max(2 * d, 10)
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    if args.experiment == "wrong-convexity" and args.dim not in (1, 2):
        raise ConfigError("wrong-convexity needs --dim 1 or 2")
    if args.experiment == "pickan-fit":
        args.family = "pickan"
        args.dim = 2
    if args.experiment == "lq":
        args.dim = 2
    if args.experiment == "appendix-1d":
        args.dim = 1
        args.layers = 0
    if args.family is not None and args.family not in ("p1", "cubic", "icnn", "pickan", "kan"):
        raise ConfigError(f"unknown family {args.family!r}")
    if args.experiment == "ot" and args.family not in ("p1", "cubic", "icnn"):
        raise ConfigError("ot needs a convex family with input gradients (p1, cubic, icnn)")
    for key in ("iterations", "batch", "P", "dim"):
        value = getattr(args, key)
        if value is not None and value < 1:
            raise ConfigError(f"--{key} must be positive")
    return args


def widths_for(args) -> tuple:
    if args.experiment == "ot" and args.family != "icnn":
        return (args.neurons, max(args.dim, 5))[: args.layers] if args.layers <= 2 else (args.neurons,) * args.layers
    if args.experiment == "ot" and args.family == "icnn":
        return (64, 64, 32)[: args.layers] if args.layers <= 3 else (args.neurons,) * args.layers
    return (args.neurons,) * args.layers


def fit_config(args, run: int) -> FitConfig:
    kw = dict(batch=args.batch, iterations=args.iterations, lr=args.lr, seed=args.seed + run,
              lr_final=args.lr_final)
    if args.validation:
        kw["validation"] = args.validation
    if args.eval_every:
        kw["eval_every"] = args.eval_every
    else:
        kw["eval_every"] = max(1, min(1000, args.iterations // 10))
    return FitConfig(**kw)


# -- experiments ------------------------------------------------------------------


def _regression_run(args, run: int, out: Path) -> dict:
    exp = args.experiment
    rng = make_rng(args.seed, run, exp)
    if exp == "fit":
        domain, target = Hypercube.cube(-2.0, 2.0, args.dim), target_quadratic_kink
    elif exp == "wrong-convexity":
        domain, target = Hypercube.cube(-2.0, 2.0, args.dim), target_wrong_convexity
    elif exp == "pickan-fit":
        domain, target = Hypercube.cube(-2.0, 2.0, 2), target_partial
    else:
        raise ConfigError(exp)
    spec = NetworkSpec(args.family, domain, widths=widths_for(args), P=args.P, adapt=args.adapt,
                       n_x=1 if args.family == "pickan" else 0)
    model = build_model(spec, rng)
    model, res = mse_fit(model, target, domain, fit_config(args, run), rng=rng)
    ckpt = out / f"checkpoint_run{run}.json"
    save_checkpoint(model, ckpt)
    if exp == "wrong-convexity":
        grid = dense_grid(domain, 401 if args.dim == 1 else 81)
        est, exact = model.forward(grid), target(grid)
        cols = [f"x{i + 1}" for i in range(args.dim)] + ["target", "estimate", "error"]
        _write_csv(out / f"error_grid_run{run}.csv", cols,
                   np.column_stack([grid, exact, est, exact - est]).tolist())
    row = [method_name(args.family, args.adapt), args.layers, args.neurons, args.P, run,
           args.iterations, res.val_mse, round(res.wall_seconds, 3)]
    return {"rows": [row], "checkpoints": [str(ckpt)]}


def _lq_run(args, run: int, out: Path) -> dict:
    rng = make_rng(args.seed, run, "lq")
    problem = LQProblem()
    spec = NetworkSpec(args.family, problem.box, widths=widths_for(args), P=args.P, adapt=args.adapt)
    model = build_model(spec, rng)
    model, res = lq_fit(model, problem, fit_config(args, run), rng=rng)
    ckpt = out / f"checkpoint_run{run}.json"
    save_checkpoint(model, ckpt)
    _write_csv(out / f"rel_error_grid_run{run}.csv", ["x1", "x2", "rel_error"], res.grid.tolist())
    row = [method_name(args.family, args.adapt), args.layers, args.neurons, args.P, run,
           args.iterations, res.fit.val_mse, round(res.fit.wall_seconds, 3)]
    print(f"run {run}: max relative error {res.max_rel_error:.4f}, model(0) {res.value_at_origin:.4f}, r0 {res.r0:.4f}")
    return {"rows": [row], "checkpoints": [str(ckpt)]}


def _appendix_run(args, run: int, out: Path) -> dict:
    domain = Hypercube.cube(-10.0, 10.0, 1)
    rows, ckpts = [], []
    for i in range(1, 5):
        rng = make_rng(args.seed, run * 10 + i, "appendix-1d")
        spec = NetworkSpec(args.family if args.family in ("p1", "cubic") else "p1", domain, widths=(),
                           P=args.P, adapt=args.adapt)
        model = build_model(spec, rng)
        model, res = mse_fit(model, lambda x, i=i: appendix_targets(i, x), domain, fit_config(args, run), rng=rng)
        ckpt = out / f"checkpoint_f{i}_run{run}.json"
        save_checkpoint(model, ckpt)
        ckpts.append(str(ckpt))
        vertices = model.layers[0].lattice_vertices(domain.lower, domain.upper)[0]
        _write_csv(out / f"vertices_f{i}_run{run}.csv", ["vertex"], [[float(v)] for v in vertices])
        rows.append([f"{method_name(spec.family, args.adapt)}[f{i}]", 0, 1, args.P, run, args.iterations,
                     res.val_mse, round(res.wall_seconds, 3)])
    return {"rows": rows, "checkpoints": ckpts}


def _ot_run(args, run: int, out: Path) -> dict:
    rng = make_rng(args.seed, run, "ot")
    problem = TransportProblem.benchmark(args.benchmark, args.dim)
    cfg = MinimaxConfig(I_ext=args.iterations, I_int=args.inner, batch=args.batch, lr=args.lr,
                        pretrain_steps=args.pretrain, seed=args.seed + run)
    if args.eval_every:
        cfg.eval_every = args.eval_every
    if args.validation:
        cfg.validation = args.validation
    dom_psi, dom_phi = potential_domains(problem, rng, cfg.pilot, cfg.margin)
    widths = widths_for(args)
    psi = build_model(NetworkSpec(args.family, dom_psi, widths=widths, P=args.P, adapt=args.adapt), rng)
    phi = build_model(NetworkSpec(args.family, dom_phi, widths=widths, P=args.P, adapt=args.adapt), rng)
    if cfg.pretrain_steps:
        identity_pretrain(psi, dom_psi, cfg.pretrain_steps, rng=rng, lr=cfg.pretrain_lr, batch=cfg.batch)
        identity_pretrain(phi, dom_phi, cfg.pretrain_steps, rng=rng, lr=cfg.pretrain_lr, batch=cfg.batch)
    phi, psi, res = minimax_train(phi, psi, problem, cfg, rng=rng)
    ckpts = []
    for name, m in (("phi", phi), ("psi", psi)):
        path = out / f"checkpoint_{name}_run{run}.json"
        save_checkpoint(m, path)
        ckpts.append(str(path))
    xs = problem.sample_source(rng, cfg.validation)
    lin = linear_map_fit(xs, problem.sample_target(rng, cfg.validation))
    lin_uvp = uvp(lin, problem.true_map, xs)
    T_hat = transport_map(psi)
    _write_csv(out / f"trace_run{run}.csv", ["outer_iter", "test_uvp"], res.trace)
    marginal_report({"target": problem.true_map(xs), "linear": lin(xs), "network": T_hat(xs)},
                    path=out / f"marginals_run{run}.csv")
    map_slices(T_hat, problem.true_map, args.dim, path=out / f"map_slices_run{run}.csv")
    neurons = "-".join(str(w) for w in widths)
    rows = [
        [args.benchmark, method_name(args.family, args.adapt), args.dim, args.P, neurons, run,
         res.best_uvp, res.final_uvp, res.outer_iters],
        [args.benchmark, "linear", args.dim, "", "", run, lin_uvp, lin_uvp, 0],
    ]
    print(f"run {run}: best test UVP {res.best_uvp:.4f}%, validation UVP {res.validation_uvp:.4f}%, "
          f"linear {lin_uvp:.4f}%")
    return {"rows": rows, "checkpoints": ckpts}


def _oracle(args, out: Path) -> int:
    rows, failures, worst = [], 0, 0.0
    for trial in range(args.trials):
        rng = make_rng(args.seed, trial, "oracle-maxaffine")
        domain = Hypercube(-rng.uniform(0.5, 2.0, args.dim), rng.uniform(0.5, 2.0, args.dim))
        a1, b1, a2, b2 = random_affine_pair(rng, args.dim)
        model = construct_max_affine_p1(a1, b1, a2, b2, domain)
        per_axis = {1: 2001, 2: 101, 3: 31}.get(args.dim, 9)
        x = dense_grid(domain, per_axis)
        err = float(np.max(np.abs(model.forward(x) - np.maximum(x @ a1 + b1, x @ a2 + b2))))
        ok = err <= 1e-10
        failures += not ok
        worst = max(worst, err)
        print(f"{'PASS' if ok else 'FAIL'} trial {trial} sup_error={err:.3e}")
        rows.append([trial, args.dim, err, int(ok)])
    _write_csv(out / "results.csv", ["trial", "d", "sup_error", "pass"], rows)
    print(f"max sup error {worst:.3e}")
    return 1 if failures else 0


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


RUNNERS = {
    "fit": _regression_run,
    "wrong-convexity": _regression_run,
    "pickan-fit": _regression_run,
    "lq": _lq_run,
    "appendix-1d": _appendix_run,
    "ot": _ot_run,
}


def _execute(args_dict: dict, run: int, out: str) -> dict:
    return RUNNERS[args_dict["experiment"]](argparse.Namespace(**args_dict), run, Path(out))


def run(args: argparse.Namespace) -> int:
    """Dispatch one experiment; returns the process exit status."""
    if args.experiment == "verify":
        try:
            results = run_suite(args.seed, checkpoint=args.checkpoint)
        except CheckpointError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(format_table(results))
        return 0 if all(r.passed for r in results) else 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.experiment == "oracle-maxaffine":
        status = _oracle(args, out)
        _write_manifest(args, out, [])
        return status

    t0 = time.perf_counter()
    runs = range(args.runs)
    if args.parallel and args.runs > 1:
        with ProcessPoolExecutor() as pool:
            outputs = list(pool.map(_execute, [vars(args)] * args.runs, runs, [str(out)] * args.runs))
    else:
        outputs = [_execute(vars(args), r, str(out)) for r in runs]
    rows = [row for o in outputs for row in o["rows"]]
    columns = OT_COLUMNS if args.experiment == "ot" else FIT_COLUMNS
    _write_csv(out / "results.csv", columns, rows)
    _write_manifest(args, out, [c for o in outputs for c in o["checkpoints"]])
    for row in rows:
        print(",".join(str(v) for v in row))
    log.info("finished %s in %.1fs", args.experiment, time.perf_counter() - t0)
    return 0


def _write_manifest(args, out: Path, checkpoints):
    manifest = {
        "config": {k: v for k, v in vars(args).items()},
        "rng": "numpy PCG64 seeded by SeedSequence([seed, run, crc32(experiment)])",
        "checkpoints": {Path(c).name: git_blob_hash(c) for c in checkpoints},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args = apply_config_file(args, args.config)
        args = resolve(args)
        return run(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


def main_entry() -> None:
    sys.exit(main())
