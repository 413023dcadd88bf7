"""Shipped oracle-equivalence suite.

Each check recomputes a quantity with an independent dense or
statistical reference at small sizes and compares at a fixed tolerance.
One case injects an indefinite matrix on purpose and passes only when
the factorization refuses it.
"""
from __future__ import annotations

import numpy as np

from .bta import (
    BtaLayout,
    NotPositiveDefinite,
    bta_factor_to_dense,
    bta_factorize,
    bta_logdet,
    bta_selected_inverse,
    bta_solve,
    bta_to_dense,
)
from .inla import PriorConfig, eval_objective, gradient_fd, latent_marginals
from .model import Dataset, HyperParameters, build_lattice_spec
from .oracles import (
    dense_conditioning,
    dense_logdet,
    dense_marginal_likelihood_objective,
    dense_objective,
    dense_selected_blocks,
    random_spd_bta,
    richardson_gradient,
)
from .simulate import SimConfig, generate_dataset, sample_gmrf


def _matrix_family(count=8):
    rng = np.random.default_rng(2024)
    for i in range(count):
        lay = BtaLayout(
            int(rng.integers(2, 8)), int(rng.integers(2, 6)), int(rng.integers(0, 4))
        )
        yield lay, random_spd_bta(lay, rng, condition=10.0 ** rng.uniform(1, 6)), rng


def _fit_problem(seed=5):
    cfg = SimConfig(rows=3, cols=3, n_t=4, n_b=2, seed=seed,
                    beta_true=np.array([1.0, -0.5]))
    data, _ = generate_dataset(cfg)
    spec = build_lattice_spec(3, 3, 4, 2, prior_precision_fixed=1e-3)
    return spec, data, PriorConfig(np.zeros(4), np.full(4, 3.0))


def check_factorization_reconstruction():
    worst = 0.0
    for lay, Q, _ in _matrix_family():
        L = bta_factorize(Q)
        Ld = bta_factor_to_dense(L)
        dense = bta_to_dense(Q)
        err = np.linalg.norm(Ld @ Ld.T - dense) / np.linalg.norm(dense)
        worst = max(worst, err)
    return worst <= 1e-12, f"max rel Frobenius {worst:.2e} (tol 1e-12)"


def check_logdet():
    worst = 0.0
    for lay, Q, _ in _matrix_family():
        got = bta_logdet(bta_factorize(Q))
        want = dense_logdet(bta_to_dense(Q))
        worst = max(worst, abs(got - want) / max(abs(want), 1.0))
    return worst <= 1e-9, f"max rel error {worst:.2e} (tol 1e-9)"


def check_solve_residual():
    worst = 0.0
    for lay, Q, rng in _matrix_family():
        b = rng.standard_normal(lay.n)
        x = bta_solve(bta_factorize(Q), b)
        dense = bta_to_dense(Q)
        worst = max(worst, np.linalg.norm(dense @ x - b) / np.linalg.norm(b))
    return worst <= 1e-10, f"max rel residual {worst:.2e} (tol 1e-10)"


def check_selected_inverse():
    worst = 0.0
    for lay, Q, _ in _matrix_family():
        S = bta_selected_inverse(bta_factorize(Q))
        Dw, Fw, Tw = dense_selected_blocks(np.linalg.inv(bta_to_dense(Q)), lay)
        scale = max(np.abs(Dw).max(), 1e-30)
        err = np.abs(S.S_diag - Dw).max()
        if lay.n_b:
            err = max(err, np.abs(S.S_arrow - Fw).max(), np.abs(S.S_tip - Tw).max())
        worst = max(worst, err / scale)
    return worst <= 1e-10, f"max rel error {worst:.2e} (tol 1e-10)"


def check_objective_dense():
    spec, data, prior = _fit_problem()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(5):
        th = HyperParameters.from_array(rng.normal(scale=0.4, size=4))
        got = eval_objective(spec, data, th, prior).value
        worst = max(worst, abs(got - dense_objective(spec, data, th, prior=prior)))
    return worst <= 1e-8, f"max abs error {worst:.2e} (tol 1e-8)"


def check_objective_marginal_likelihood():
    spec, data, prior = _fit_problem(seed=6)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(4):
        th = HyperParameters.from_array(rng.normal(scale=0.4, size=4))
        got = eval_objective(spec, data, th, prior).value
        want = dense_marginal_likelihood_objective(spec, data, th, prior=prior)
        worst = max(worst, abs(got - want))
    return worst <= 1e-7, f"max abs error {worst:.2e} (tol 1e-7)"


def check_gradient():
    spec, data, prior = _fit_problem(seed=7)
    vec = np.array([0.1, -0.1, 0.2, 0.0])
    got = gradient_fd(spec, data, vec, h=1e-5, prior=prior)

    def f(v):
        return dense_objective(spec, data, HyperParameters.from_array(v), prior=prior)

    want = richardson_gradient(f, vec, 1e-4)
    rel = np.abs(got - want).max() / np.abs(want).max()
    return rel <= 1e-5, f"max rel error {rel:.2e} (tol 1e-5)"


def check_latent_marginals():
    spec, data, _ = _fit_problem(seed=8)
    th = HyperParameters(0.3, -0.1, 0.2, 0.1)
    means, sds = latent_marginals(spec, data, th)
    mean_d, sd_d = dense_conditioning(spec, data, th)
    rel = max(
        np.abs(means - mean_d).max() / np.abs(mean_d).max(),
        np.abs(sds - sd_d).max() / np.abs(sd_d).max(),
    )
    return rel <= 1e-8, f"max rel error {rel:.2e} (tol 1e-8)"


def check_sampler_covariance():
    lay = BtaLayout(2, 3, 1)
    rng = np.random.default_rng(9)
    Q = random_spd_bta(lay, rng, condition=20.0)
    L = bta_factorize(Q)
    draws = np.array([sample_gmrf(L, rng) for _ in range(20_000)])
    want = np.diag(np.linalg.inv(bta_to_dense(Q)))
    rel = (np.abs(np.var(draws, axis=0) - want) / want).max()
    return rel <= 0.08, f"max diag rel error {rel:.2e} (tol 8e-2, 20000 draws)"


def check_rejects_indefinite():
    # corrupted fixture: flip the sign of one diagonal block
    lay = BtaLayout(3, 3, 1)
    rng = np.random.default_rng(10)
    Q = random_spd_bta(lay, rng, condition=10.0)
    Q.D[1] = -Q.D[1]
    try:
        bta_factorize(Q)
    except NotPositiveDefinite as exc:
        return True, f"refused with block_index={exc.block_index}"
    return False, "indefinite matrix was factorized without complaint"


CHECKS = [
    ("factorization reconstruction", check_factorization_reconstruction),
    ("log-determinant vs dense", check_logdet),
    ("solve residual", check_solve_residual),
    ("selected inverse vs dense", check_selected_inverse),
    ("objective vs dense pipeline", check_objective_dense),
    ("objective vs exact marginal likelihood", check_objective_marginal_likelihood),
    ("gradient vs Richardson reference", check_gradient),
    ("latent marginals vs dense conditioning", check_latent_marginals),
    ("sampler covariance (Monte Carlo)", check_sampler_covariance),
    ("indefinite matrix rejection", check_rejects_indefinite),
]


def run_selftest(out=print) -> int:
    """Run every check, print one line each, return 0 iff all pass."""
    failures = 0
    width = max(len(name) for name, _ in CHECKS)
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        failures += not ok
        out(f"{'pass' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
