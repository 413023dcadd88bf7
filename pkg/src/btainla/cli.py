"""Command-line entry points: simulate, fit, benchmark, selftest.

Run configs are line-oriented `key = value` files; unknown or duplicate
keys are hard errors.  Exit codes: 0 success (fit: converged), 2 fit
stopped at the iteration cap, 1 any error.  Tables go to stdout,
diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import os
import statistics
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .bta import bta_factorize, bta_selected_inverse
from .inla import FitOptions, LineSearchFailure, PriorConfig, run_inference
from .io import (
    ConfigError,
    parse_run_config,
    read_dataset,
    write_dataset,
    write_hyper_csv,
    write_latent_csv,
    write_timing_table,
    write_trace_csv,
)
from .model import (
    Dataset,
    HyperParameters,
    assemble_conditional_precision,
    assemble_prior_precision,
    build_lattice_spec,
)
from .parallel import STAGES, TaskPlan, default_worker_count
from .simulate import SimConfig, generate_dataset

SIMULATE_KEYS = {
    "rows": ("int", None),
    "cols": ("int", None),
    "n_t": ("int", None),
    "n_b": ("int", None),
    "seed": ("int", None),
    "theta_true": ("floats", 4),
    "beta_true": ("floats", None),
    "obs_per_timestep_ratio": ("float", None),
}

FIT_KEYS = {
    "rows": ("int", None),
    "cols": ("int", None),
    "n_t": ("int", None),
    "n_b": ("int", None),
    "theta0": ("floats", 4),
    "fd_step_gradient": ("float", None),
    "fd_step_hessian": ("float", None),
    "max_iter": ("int", None),
    "tol_grad": ("float", None),
    "tol_f_rel": ("float", None),
    "workers": ("int", None),
    "seed": ("int", None),
    "prior_means": ("floats", 4),
    "prior_sds": ("floats", 4),
    "fixed_effect_prior_precision": ("float", None),
}

BENCHMARK_KEYS = {
    "bench_n_s": ("int", None),
    "bench_n_t": ("ints", None),
    "bench_n_b": ("int", None),
    "bench_reps": ("int", None),
    "bench_obs_multipliers": ("floats", None),
    "seed": ("int", None),
}

FIT_DEFAULTS = {
    "theta0": (0.0, 0.0, 0.0, 0.0),
    "fd_step_gradient": 1e-5,
    "fd_step_hessian": 1e-3,
    "max_iter": 200,
    "tol_grad": 1e-3,
    "tol_f_rel": 1e-7,
    "prior_means": (0.0, 0.0, 0.0, 0.0),
    "prior_sds": (3.0, 3.0, 3.0, 3.0),
    "fixed_effect_prior_precision": 1e-3,
}


def _require_dims(cfg, path):
    missing = [k for k in ("rows", "cols", "n_t", "n_b") if k not in cfg]
    if missing:
        raise ConfigError(f"{path}: missing required keys: {', '.join(missing)}")


def _resolve_workers(flag, cfg):
    if flag is not None:
        n = flag
    elif "workers" in cfg:
        n = cfg["workers"]
    elif os.environ.get("BTA_INLA_WORKERS"):
        raw = os.environ["BTA_INLA_WORKERS"]
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"BTA_INLA_WORKERS must be an integer, got '{raw}'") from None
    else:
        n = default_worker_count()
    if n < 1:
        raise ConfigError("workers must be at least 1")
    return n


def cmd_simulate(config_path, out_dir) -> int:
    cfg = parse_run_config(config_path, SIMULATE_KEYS)
    kwargs = {k: cfg[k] for k in ("rows", "cols", "n_t", "n_b", "seed") if k in cfg}
    if "obs_per_timestep_ratio" in cfg:
        kwargs["obs_per_timestep_ratio"] = cfg["obs_per_timestep_ratio"]
    if "theta_true" in cfg:
        kwargs["theta_true"] = HyperParameters(*cfg["theta_true"])
    if "beta_true" in cfg:
        kwargs["beta_true"] = np.array(cfg["beta_true"])
    try:
        sim = SimConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{config_path}: {exc}") from None
    data, truth = generate_dataset(sim)
    write_dataset(out_dir, data, truth)
    print(
        f"wrote {data.n_o} observations for layout "
        f"(n_s={data.layout.n_s}, n_t={data.layout.n_t}, n_b={data.layout.n_b}) "
        f"to {out_dir}"
    )
    return 0


def cmd_fit(config_path, data_dir, out_dir, workers_flag=None) -> int:
    cfg = parse_run_config(config_path, FIT_KEYS)
    _require_dims(cfg, config_path)
    get = lambda k: cfg.get(k, FIT_DEFAULTS[k])
    workers = _resolve_workers(workers_flag, cfg)
    spec = build_lattice_spec(
        cfg["rows"], cfg["cols"], cfg["n_t"], cfg["n_b"],
        prior_precision_fixed=get("fixed_effect_prior_precision"),
    )
    data = read_dataset(data_dir, spec.layout)
    prior = PriorConfig(np.array(get("prior_means")), np.array(get("prior_sds")))
    opts = FitOptions(
        fd_step_gradient=get("fd_step_gradient"),
        fd_step_hessian=get("fd_step_hessian"),
        max_iter=get("max_iter"),
        tol_grad=get("tol_grad"),
        tol_f_rel=get("tol_f_rel"),
    )
    plan = TaskPlan(worker_count=workers)
    try:
        report = run_inference(spec, data, prior, np.array(get("theta0")), opts, plan)
    except LineSearchFailure as exc:
        print(f"error: line search failed: {exc}", file=sys.stderr)
        return 1

    os.makedirs(out_dir, exist_ok=True)
    write_hyper_csv(os.path.join(out_dir, "hyperparameters.csv"), report.hyper_marginals)
    write_latent_csv(
        os.path.join(out_dir, "latent.csv"), report.latent_means, report.latent_sds
    )
    write_trace_csv(os.path.join(out_dir, "trace.csv"), report.trace)
    write_timing_table(
        os.path.join(out_dir, "timing.txt"), report.diagnostics.stage_seconds, STAGES
    )

    d = report.diagnostics
    for m in report.hyper_marginals:
        print(
            f"{m.name}: mode_log={m.mode_log:.6g} sd_log={m.sd_log:.6g} "
            f"mode_natural={m.mode_natural:.6g}"
        )
    status = "converged" if d.converged else "stopped at iteration cap"
    print(
        f"{status} after {d.iterations} iterations, "
        f"{d.function_evaluations} objective evaluations, "
        f"{d.wall_seconds:.2f}s with {workers} worker(s); report in {out_dir}"
    )
    if d.hessian_not_pd:
        print("warning: Hessian at the mode is not positive definite; "
              "sd_log columns are NaN", file=sys.stderr)
    return 0 if d.converged else 2


def _lattice_dims(n_s):
    """Closest-to-square factorization, favoring rows <= cols."""
    r = int(np.sqrt(n_s))
    while n_s % r:
        r -= 1
    return r, n_s // r


def _time_kernels(Q, reps):
    """Median factorize and selected-inverse seconds over reps runs."""
    tf, ts = [], []
    with threadpool_limits(limits=1):
        for _ in range(reps):
            t0 = time.perf_counter()
            L = bta_factorize(Q)
            t1 = time.perf_counter()
            bta_selected_inverse(L)
            t2 = time.perf_counter()
            tf.append(t1 - t0)
            ts.append(t2 - t1)
    return statistics.median(tf), statistics.median(ts)


def cmd_benchmark(config_path, out_path) -> int:
    cfg = parse_run_config(config_path, BENCHMARK_KEYS)
    n_s = cfg.get("bench_n_s", 64)
    n_t_ladder = cfg.get("bench_n_t", (32, 64, 128, 256))
    n_b = cfg.get("bench_n_b", 4)
    reps = cfg.get("bench_reps", 5)
    seed = cfg.get("seed", 0)
    if reps < 5:
        raise ConfigError(f"{config_path}: bench_reps must be at least 5")
    rows, cols = _lattice_dims(n_s)
    theta0 = HyperParameters(0.0, 0.0, 0.0, 0.0)

    header = "n_s,n_t,n,median_seconds_factorize,median_seconds_selinv"
    lines = [header]
    for n_t in n_t_ladder:
        spec = build_lattice_spec(rows, cols, n_t, n_b, prior_precision_fixed=1e-3)
        Q = assemble_prior_precision(spec, theta0)
        mf, ms = _time_kernels(Q, reps)
        lines.append(f"{n_s},{n_t},{spec.layout.n},{mf:.6e},{ms:.6e}")
    for line in lines:
        print(line)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    if "bench_obs_multipliers" in cfg:
        obs_path = _sibling_obs_path(out_path)
        obs_lines = [
            "n_s,n_t,n,n_o,median_seconds_factorize,median_seconds_selinv"
        ]
        n_t = n_t_ladder[0]
        spec = build_lattice_spec(rows, cols, n_t, n_b, prior_precision_fixed=1e-3)
        n = spec.layout.n
        rng = np.random.default_rng(seed)
        Q_x = assemble_prior_precision(spec, theta0)
        for mult in cfg["bench_obs_multipliers"]:
            n_o = int(round(mult * n))
            data = Dataset(
                layout=spec.layout,
                y=rng.standard_normal(n_o),
                a_rows=np.arange(n_o),
                a_cols=rng.integers(0, n_t, n_o) * n_s + rng.integers(0, n_s, n_o),
                a_vals=np.ones(n_o),
                Z=rng.standard_normal((n_o, n_b)),
            )
            data.gram  # scatter cache is per-dataset work, not kernel work
            Q_c = assemble_conditional_precision(Q_x, data, theta0)
            mf, ms = _time_kernels(Q_c, reps)
            obs_lines.append(f"{n_s},{n_t},{n},{n_o},{mf:.6e},{ms:.6e}")
        for line in obs_lines:
            print(line)
        with open(obs_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(obs_lines) + "\n")
    return 0


def _sibling_obs_path(out_path):
    stem, ext = os.path.splitext(out_path)
    return f"{stem}_obs{ext or '.csv'}"


def cmd_selftest() -> int:
    from .selftest import run_selftest

    return run_selftest()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="btainla",
        description="Spatial-temporal Bayesian inference on block "
        "tridiagonal arrowhead precision matrices",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a seeded synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="run the full inference pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("benchmark", help="time the factorization kernels")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    sub.add_parser("selftest", help="run the built-in oracle checks")

    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out)
        if args.command == "fit":
            return cmd_fit(args.config, args.data, args.out, args.workers)
        if args.command == "benchmark":
            return cmd_benchmark(args.config, args.out)
        return cmd_selftest()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # contract: any error exits 1, not a traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
