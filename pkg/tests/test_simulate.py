"""Synthetic generator: determinism, observation geometry, and Monte
Carlo agreement with the dense covariance."""

import numpy as np
import pytest

from btainla.bta import BtaLayout, BtaMatrix, bta_factorize, bta_to_dense
from btainla.model import HyperParameters, build_lattice_spec
from btainla.oracles import ols_fit, random_spd_bta
from btainla.simulate import SimConfig, _observe, generate_dataset, sample_gmrf


class TestSimConfig:
    def test_rejects_nonpositive_ratio(self):
        with pytest.raises(ValueError):
            SimConfig(obs_per_timestep_ratio=0.0)

    def test_rejects_missing_intercept(self):
        with pytest.raises(ValueError):
            SimConfig(n_b=0)

    def test_rejects_out_of_range_beta(self):
        with pytest.raises(ValueError):
            SimConfig(n_b=2, beta_true=np.array([0.0, 5.5]))

    def test_rejects_wrong_beta_length(self):
        with pytest.raises(ValueError):
            SimConfig(n_b=2, beta_true=np.array([1.0]))


class TestSampleGmrf:
    def test_identity_precision_returns_the_normals(self):
        lay = BtaLayout(2, 2, 1)
        Q = BtaMatrix(
            lay,
            np.stack([np.eye(2)] * 2),
            np.zeros((1, 2, 2)),
            np.zeros((2, 1, 2)),
            np.eye(1),
        )
        L = bta_factorize(Q)
        z = np.random.default_rng(0).standard_normal(lay.n)
        u = sample_gmrf(L, np.random.default_rng(0))
        np.testing.assert_allclose(u, z, atol=1e-14)

    def test_scaled_identity_variance(self):
        # Q = 4 I, so each coordinate has variance 1/4
        lay = BtaLayout(1, 2, 0)
        Q = BtaMatrix(
            lay,
            4.0 * np.ones((2, 1, 1)),
            np.zeros((1, 1, 1)),
            np.zeros((2, 0, 1)),
            np.zeros((0, 0)),
        )
        L = bta_factorize(Q)
        rng = np.random.default_rng(0)
        draws = np.array([sample_gmrf(L, rng) for _ in range(100_000)])
        assert draws.var() == pytest.approx(0.25, rel=0.02)

    def test_empirical_covariance_matches_dense_inverse(self):
        lay = BtaLayout(3, 3, 3)
        rng = np.random.default_rng(5)
        Q = random_spd_bta(lay, rng, condition=50.0)
        L = bta_factorize(Q)
        want = np.diag(np.linalg.inv(bta_to_dense(Q)))
        draws = np.array([sample_gmrf(L, rng) for _ in range(100_000)])
        got = np.diag(np.cov(draws.T))
        assert (np.abs(got - want) / want).max() <= 0.05


class TestGenerateDataset:
    def test_same_seed_is_bit_identical(self):
        a, ta = generate_dataset(SimConfig(rows=3, cols=4, n_t=5, n_b=2, seed=42))
        b, tb = generate_dataset(SimConfig(rows=3, cols=4, n_t=5, n_b=2, seed=42))
        assert a.y.tobytes() == b.y.tobytes()
        assert a.Z.tobytes() == b.Z.tobytes()
        assert np.array_equal(a.a_cols, b.a_cols)
        assert ta.beta.tobytes() == tb.beta.tobytes()
        assert ta.u.tobytes() == tb.u.tobytes()

    def test_different_seeds_differ(self):
        a, _ = generate_dataset(SimConfig(seed=1))
        b, _ = generate_dataset(SimConfig(seed=2))
        assert not np.array_equal(a.y, b.y)

    def test_observation_count_formula(self):
        for ratio in (0.5, 1.0, 2.0, 2.7):
            cfg = SimConfig(
                rows=3, cols=3, n_t=4, n_b=2, seed=0, obs_per_timestep_ratio=ratio
            )
            data, _ = generate_dataset(cfg)
            assert data.n_o == int(np.rint(ratio * 9)) * 4

    def test_single_block_rule_holds(self):
        data, _ = generate_dataset(SimConfig(rows=4, cols=3, n_t=6, n_b=3, seed=9))
        data.gram  # would raise BandwidthViolation otherwise
        blk = data.a_cols // data.layout.n_s
        per_step = data.n_o // data.layout.n_t
        assert np.array_equal(blk, np.repeat(np.arange(6), per_step))

    def test_unit_weights_and_intercept(self):
        data, _ = generate_dataset(SimConfig(seed=3))
        np.testing.assert_array_equal(data.a_vals, np.ones(data.n_o))
        np.testing.assert_array_equal(data.Z[:, 0], np.ones(data.n_o))

    def test_default_beta_in_bounds(self):
        _, truth = generate_dataset(SimConfig(seed=8))
        assert (np.abs(truth.beta) <= 5.0).all()

    def test_noiseless_limit_reproduces_latents(self):
        cfg = SimConfig(
            rows=3, cols=3, n_t=4, n_b=1,
            beta_true=np.zeros(1),
            theta_true=HyperParameters(np.log(1e12), 0.0, 0.0, 0.0),
            seed=7,
        )
        data, truth = generate_dataset(cfg)
        assert np.abs(data.y - truth.u[data.a_cols]).max() <= 1e-5

    def test_zero_latents_zero_noise_gives_pure_regression(self):
        spec = build_lattice_spec(3, 3, 4, 2)
        cfg = SimConfig(
            rows=3, cols=3, n_t=4, n_b=2,
            beta_true=np.array([1.5, -2.0]),
            theta_true=HyperParameters(800.0, 0.0, 0.0, 0.0),
            seed=1,
        )
        data = _observe(spec, cfg, np.zeros(36), cfg.beta_true, np.random.default_rng(1))
        np.testing.assert_array_equal(data.y, data.Z @ cfg.beta_true)

    def test_ols_recovers_beta_on_default_config(self):
        data, truth = generate_dataset(SimConfig(seed=11))
        beta_hat, se = ols_fit(data.Z, data.y)
        assert (np.abs(beta_hat - truth.beta) <= 3.0 * se).all()
