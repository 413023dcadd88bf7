"""Task orchestration: worker pool, numerator/denominator split, stage timing.

Three concurrency layers:
  1. batches of objective evaluations (gradient stencils, Hessian
     stencils, grid points) fan out as independent tasks;
  2. within one evaluation the prior path (log det Q_x) and the
     conditional path (log det Q_{x|y}, mean solve, quadratic terms)
     can run as two separate subtasks;
  3. dense kernels inside a task are pinned to one BLAS thread, so
     results are bitwise identical whatever the worker count and the
     pool never oversubscribes cores.

Workers receive (spec, data) once at pool startup; tasks ship only the
4-vector theta.  Combination of the two paths into an objective value
always happens in the parent process, from the same pure functions the
inline path uses, so inline and pooled runs agree to the last bit.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

STAGE_ASSEMBLY = "assembly"
STAGE_FACTOR_PRIOR = "factorization numerator"
STAGE_FACTOR_COND = "factorization denominator"
STAGE_SOLVE = "solve"
STAGE_SELINV = "selected inversion"
STAGE_OTHER = "other"
STAGES = (
    STAGE_ASSEMBLY,
    STAGE_FACTOR_PRIOR,
    STAGE_FACTOR_COND,
    STAGE_SOLVE,
    STAGE_SELINV,
    STAGE_OTHER,
)


class StageTimers:
    """Named monotonic duration accumulators, merged at task join points."""

    def __init__(self):
        self._acc: dict[str, list] = {}

    def add(self, name: str, seconds: float, count: int = 1):
        if seconds < 0:
            raise ValueError("durations must be non-negative")
        slot = self._acc.setdefault(name, [0, 0.0])
        slot[0] += count
        slot[1] += seconds

    @contextmanager
    def timed(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add(name, time.perf_counter() - t0)

    def merge(self, snapshot: dict):
        for name, (count, total) in snapshot.items():
            self.add(name, total, count)

    def snapshot(self) -> dict:
        return {k: (v[0], v[1]) for k, v in self._acc.items()}

    def total(self) -> float:
        return float(sum(v[1] for v in self._acc.values()))


def timed_stage(timers: StageTimers, name: str, work: Callable):
    """Run work() under a named timer; returns (result, duration)."""
    t0 = time.perf_counter()
    result = work()
    dt = time.perf_counter() - t0
    timers.add(name, dt)
    return result, dt


@dataclass
class TaskPlan:
    """How a pipeline run schedules its work."""

    worker_count: int = 1
    layer2_split: bool = True
    stage_timers: StageTimers = field(default_factory=StageTimers)

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")


def default_worker_count() -> int:
    # one worker per concurrent gradient-stencil task, capped by the host
    return max(1, min(os.cpu_count() or 1, 9))


# ---------------------------------------------------------------------------
# worker-side plumbing (top level so the pool can import it)

_WORKER_CTX = None


def _init_worker(spec, data):
    global _WORKER_CTX
    _WORKER_CTX = (spec, data)


def _task_eval(theta_vec, kind):
    from .inla import evaluate_parts

    spec, data = _WORKER_CTX
    return evaluate_parts(spec, data, theta_vec, kind)


class ObjectivePool:
    """Evaluation fan-out for one (spec, data) pair.

    worker_count == 1 runs everything inline; otherwise a process pool
    is started once and reused for every batch of the run.
    """

    def __init__(self, spec, data, prior, plan: TaskPlan | None = None):
        from .inla import evaluate_parts  # noqa: F401  (fail fast if missing)

        self.spec = spec
        self.data = data
        self.prior = prior
        self.plan = plan if plan is not None else TaskPlan()
        self.evaluations = 0
        data.gram  # build the scatter cache once, before any fork/pickle
        self._executor = None
        if self.plan.worker_count > 1:
            self._executor = ProcessPoolExecutor(
                max_workers=self.plan.worker_count,
                initializer=_init_worker,
                initargs=(spec, data),
            )

    def map(self, thetas: Sequence) -> list:
        """Objective values for every theta, in input order.

        Failures (non-SPD iterates and the like) come back as +inf
        entries; a batch never aborts on one bad point.
        """
        from .inla import combine_objective, evaluate_parts

        thetas = [np.asarray(t, dtype=np.float64) for t in thetas]
        if not thetas:
            return []
        split = self.plan.layer2_split
        if self._executor is None:
            if split:
                payloads = [
                    (
                        evaluate_parts(self.spec, self.data, t, "prior"),
                        evaluate_parts(self.spec, self.data, t, "conditional"),
                    )
                    for t in thetas
                ]
            else:
                payloads = [
                    (evaluate_parts(self.spec, self.data, t, "both"), None)
                    for t in thetas
                ]
        elif split:
            futs = [
                (
                    self._executor.submit(_task_eval, t, "prior"),
                    self._executor.submit(_task_eval, t, "conditional"),
                )
                for t in thetas
            ]
            payloads = [(a.result(), b.result()) for a, b in futs]
        else:
            futs = [self._executor.submit(_task_eval, t, "both") for t in thetas]
            payloads = [(f.result(), None) for f in futs]

        out = []
        for t, (pa, pb) in zip(thetas, payloads):
            value = combine_objective(t, self.prior, self.data, pa, pb)
            out.append(value)
            self.plan.stage_timers.merge(pa[2])
            if pb is not None:
                self.plan.stage_timers.merge(pb[2])
        self.evaluations += len(thetas)
        return out

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def parallel_map_objective(thetas, spec, data, prior=None, plan=None, pool=None):
    """Evaluate the objective at every theta on the worker pool.

    Output order matches input order and equals sequential evaluation.
    """
    if pool is not None:
        return pool.map(thetas)
    with ObjectivePool(spec, data, prior, plan) as p:
        return p.map(thetas)
