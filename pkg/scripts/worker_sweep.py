"""Worker scaling of the objective-evaluation pool.

Times the 9-point gradient batch (one center plus four forward/backward
pairs, the per-iteration workload of the mode search) across worker
counts, and the 2-worker numerator/denominator split on a single
evaluation. Worth running only on a multi-core host; also prints a
checksum of the batch values so runs can be compared for determinism.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from btainla.inla import PriorConfig
from btainla.model import build_lattice_spec
from btainla.parallel import ObjectivePool, TaskPlan
from btainla.simulate import SimConfig, generate_dataset


def batch_points(h=1e-5):
    pts = [np.zeros(4)]
    for i in range(4):
        for s in (1.0, -1.0):
            p = np.zeros(4)
            p[i] = s * h
            pts.append(p)
    return pts


def timed_batch(pool, pts, reps):
    pool.map(pts[:1])  # warm workers and caches
    samples = []
    values = None
    for _ in range(reps):
        t0 = time.perf_counter()
        values = pool.map(pts)
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples)), values


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=8)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--n-t", type=int, default=16)
    ap.add_argument("--n-b", type=int, default=4)
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=55)
    args = ap.parse_args(argv)

    print(f"host cpus: {os.cpu_count()}")
    cfg = SimConfig(
        rows=args.rows, cols=args.cols, n_t=args.n_t, n_b=args.n_b,
        obs_per_timestep_ratio=2.0, seed=args.seed,
    )
    data, _ = generate_dataset(cfg)
    spec = build_lattice_spec(args.rows, args.cols, args.n_t, args.n_b)
    prior = PriorConfig(np.zeros(4), np.full(4, 3.0))
    pts = batch_points()

    base = None
    print(f"{'workers':>8} {'split':>6} {'batch_s':>9} {'speedup':>8}  checksum")
    for w in args.workers:
        for split in (False, True):
            plan = TaskPlan(worker_count=w, layer2_split=split)
            with ObjectivePool(spec, data, prior, plan) as pool:
                med, values = timed_batch(pool, pts, args.reps)
            digest = hashlib.sha256(
                np.array([v.value for v in values]).tobytes()
            ).hexdigest()[:12]
            if base is None:
                base = med
            print(
                f"{w:>8} {str(split):>6} {med:>9.4f} {base / med:>8.2f}  {digest}"
            )

    # split gain on the per-evaluation critical path, 2 workers
    single = pts[:1]
    plan_a = TaskPlan(worker_count=2, layer2_split=False)
    plan_b = TaskPlan(worker_count=2, layer2_split=True)
    with ObjectivePool(spec, data, prior, plan_a) as pool:
        t_nosplit, _ = timed_batch(pool, single, args.reps)
    with ObjectivePool(spec, data, prior, plan_b) as pool:
        t_split, _ = timed_batch(pool, single, args.reps)
    print(
        f"\nsingle evaluation, 2 workers: no split {t_nosplit:.4f}s, "
        f"split {t_split:.4f}s, gain {t_nosplit / t_split:.2f}x"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
