"""Worker-pool orchestration: determinism across worker counts and
split modes, order preservation, stage accounting."""

import math
import time

import numpy as np
import pytest

from btainla.inla import FitOptions, PriorConfig, eval_objective, run_inference
from btainla.model import Dataset, build_lattice_spec
from btainla.parallel import (
    STAGES,
    ObjectivePool,
    StageTimers,
    TaskPlan,
    default_worker_count,
    parallel_map_objective,
    timed_stage,
)


def tiny_problem(seed=3):
    rng = np.random.default_rng(seed)
    spec = build_lattice_spec(2, 2, 3, 1, prior_precision_fixed=1e-3)
    lay = spec.layout
    n_o = 20
    t = rng.integers(0, lay.n_t, n_o)
    site = rng.integers(0, lay.n_s, n_o)
    data = Dataset(
        layout=lay,
        y=rng.standard_normal(n_o),
        a_rows=np.arange(n_o),
        a_cols=t * lay.n_s + site,
        a_vals=np.ones(n_o),
        Z=np.ones((n_o, 1)),
    )
    return spec, data, PriorConfig(np.zeros(4), np.full(4, 3.0))


class TestStageTimers:
    def test_add_and_total(self):
        t = StageTimers()
        t.add("solve", 0.5)
        t.add("solve", 0.25, count=3)
        assert t.snapshot()["solve"] == (4, 0.75)
        assert t.total() == 0.75

    def test_timed_context_measures(self):
        t = StageTimers()
        with t.timed("assembly"):
            time.sleep(0.01)
        count, seconds = t.snapshot()["assembly"]
        assert count == 1
        assert seconds >= 0.005

    def test_merge_accumulates(self):
        a = StageTimers()
        b = StageTimers()
        a.add("solve", 1.0)
        b.add("solve", 2.0, count=2)
        b.add("other", 0.5)
        a.merge(b.snapshot())
        assert a.snapshot() == {"solve": (3, 3.0), "other": (1, 0.5)}

    def test_timed_stage_returns_result_and_duration(self):
        t = StageTimers()
        out, dt = timed_stage(t, "solve", lambda: 41 + 1)
        assert out == 42
        assert dt >= 0
        assert t.snapshot()["solve"][0] == 1


class TestTaskPlan:
    def test_rejects_zero_workers(self):
        with pytest.raises(ValueError):
            TaskPlan(worker_count=0)

    def test_default_worker_count_bounded(self):
        assert 1 <= default_worker_count() <= 9


class TestDeterminism:
    def test_split_matches_unsplit_bitwise(self):
        spec, data, prior = tiny_problem()
        rng = np.random.default_rng(1)
        thetas = [rng.normal(scale=0.4, size=4) for _ in range(5)]
        a = parallel_map_objective(
            thetas, spec, data, prior, TaskPlan(worker_count=1, layer2_split=True)
        )
        b = parallel_map_objective(
            thetas, spec, data, prior, TaskPlan(worker_count=1, layer2_split=False)
        )
        assert [v.value for v in a] == [v.value for v in b]

    def test_pooled_matches_inline_bitwise(self):
        spec, data, prior = tiny_problem()
        rng = np.random.default_rng(2)
        thetas = [rng.normal(scale=0.4, size=4) for _ in range(5)]
        inline = [
            v.value
            for v in parallel_map_objective(
                thetas, spec, data, prior, TaskPlan(worker_count=1)
            )
        ]
        for workers, split in ((2, True), (3, False)):
            pooled = [
                v.value
                for v in parallel_map_objective(
                    thetas,
                    spec,
                    data,
                    prior,
                    TaskPlan(worker_count=workers, layer2_split=split),
                )
            ]
            assert pooled == inline

    def test_repeated_theta_is_bitwise_stable(self):
        spec, data, prior = tiny_problem()
        theta = np.array([0.1, -0.2, 0.3, 0.0])
        out = parallel_map_objective(
            [theta] * 9, spec, data, prior, TaskPlan(worker_count=2)
        )
        vals = {v.value for v in out}
        assert len(vals) == 1

    def test_full_reports_identical_across_worker_counts(self):
        spec, data, prior = tiny_problem()
        reports = {
            w: run_inference(
                spec, data, prior, np.zeros(4), FitOptions(), TaskPlan(worker_count=w)
            )
            for w in (1, 2)
        }
        a, b = reports[1], reports[2]
        np.testing.assert_array_equal(a.theta_mode.to_array(), b.theta_mode.to_array())
        np.testing.assert_array_equal(a.neg_hessian, b.neg_hessian)
        np.testing.assert_array_equal(a.latent_means, b.latent_means)
        np.testing.assert_array_equal(a.latent_sds, b.latent_sds)
        assert a.trace == b.trace
        assert a.hyper_marginals == b.hyper_marginals


class TestPoolBehavior:
    def test_order_matches_sequential_evaluation(self):
        spec, data, prior = tiny_problem()
        rng = np.random.default_rng(4)
        thetas = [rng.normal(scale=0.3, size=4) for _ in range(6)]
        batched = parallel_map_objective(
            thetas, spec, data, prior, TaskPlan(worker_count=2)
        )
        for th, got in zip(thetas, batched):
            assert got.value == eval_objective(spec, data, th, prior).value

    def test_one_bad_point_does_not_poison_the_batch(self):
        spec, data, prior = tiny_problem()
        thetas = [np.zeros(4), np.full(4, 800.0), np.array([0.1, 0.0, 0.0, 0.0])]
        out = parallel_map_objective(thetas, spec, data, prior, TaskPlan())
        assert math.isfinite(out[0].value)
        assert out[1].value == math.inf and out[1].failure is not None
        assert math.isfinite(out[2].value)

    def test_empty_batch(self):
        spec, data, prior = tiny_problem()
        assert parallel_map_objective([], spec, data, prior, TaskPlan()) == []

    def test_stage_timers_collected_per_evaluation(self):
        spec, data, prior = tiny_problem()
        plan = TaskPlan(worker_count=1, layer2_split=True)
        thetas = [np.zeros(4), np.array([0.2, 0.0, 0.0, 0.0])]
        parallel_map_objective(thetas, spec, data, prior, plan)
        snap = plan.stage_timers.snapshot()
        assert snap["solve"][0] == len(thetas)
        assert snap["factorization numerator"][0] == len(thetas)
        assert snap["factorization denominator"][0] == len(thetas)
        assert set(snap) <= set(STAGES)

    def test_pool_reuse_counts_evaluations(self):
        spec, data, prior = tiny_problem()
        with ObjectivePool(spec, data, prior, TaskPlan()) as pool:
            pool.map([np.zeros(4)])
            parallel_map_objective(
                [np.zeros(4), np.zeros(4)], spec, data, prior, pool=pool
            )
            assert pool.evaluations == 3
