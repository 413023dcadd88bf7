"""Seeded synthetic datasets: latent field from the prior, node-coincident
observations, covariates from site coordinates.

The RNG draw order is frozen (beta when defaulted, field normals, sites
per time step, covariate noise, observation noise) so a seed pins the
dataset bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bta import BtaFactor, bta_backward_solve, bta_factorize
from .model import (
    Dataset,
    HyperParameters,
    ModelSpec,
    assemble_prior_precision,
    build_lattice_spec,
)

DEFAULT_THETA_TRUE = HyperParameters(np.log(2.0), 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SimConfig:
    rows: int = 8
    cols: int = 8
    n_t: int = 16
    n_b: int = 4
    theta_true: HyperParameters = DEFAULT_THETA_TRUE
    beta_true: np.ndarray | None = None  # drawn uniform on [-5, 5] when None
    obs_per_timestep_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_b < 1:
            raise ValueError("n_b must be at least 1 (intercept column)")
        if not self.obs_per_timestep_ratio > 0:
            raise ValueError("obs_per_timestep_ratio must be positive")
        if self.beta_true is not None:
            beta = np.asarray(self.beta_true, dtype=np.float64)
            if beta.shape != (self.n_b,):
                raise ValueError(f"beta_true must have length {self.n_b}")
            if (np.abs(beta) > 5.0).any():
                raise ValueError("beta_true components must lie in [-5, 5]")
            object.__setattr__(self, "beta_true", beta)


@dataclass(frozen=True)
class TruthRecord:
    theta: HyperParameters
    beta: np.ndarray
    u: np.ndarray


def sample_gmrf(L: BtaFactor, rng) -> np.ndarray:
    """One draw from N(0, Q^-1) given L with L L' = Q.

    Solves L' u = z for standard normal z, so cov(u) = L^-T L^-1 = Q^-1.
    """
    z = rng.standard_normal(L.layout.n)
    return bta_backward_solve(L, z)


def _covariates(sites, rows, cols, n_b, rng) -> np.ndarray:
    """Intercept plus standardized coordinate transforms with uniform noise."""
    n_o = len(sites)
    Z = np.ones((n_o, n_b))
    if n_b == 1:
        return Z
    xc = (sites % cols) / max(cols - 1, 1)
    yc = (sites // cols) / max(rows - 1, 1)
    pool = [xc, yc, np.sin(2.0 * np.pi * xc), np.sin(2.0 * np.pi * yc), xc * yc]
    k = 1
    while len(pool) < n_b - 1:
        pool.append(np.sin(2.0 * np.pi * k * xc))
        k += 1
    for j in range(1, n_b):
        col = pool[j - 1] - pool[j - 1].mean()
        s = col.std()
        if s > 1e-12:
            col = col / s
        Z[:, j] = col + rng.uniform(-0.1, 0.1, size=n_o)
    return Z


def _observe(spec: ModelSpec, cfg: SimConfig, u, beta, rng):
    """Sites, covariates and noisy observations for a given latent field."""
    ns, nt = spec.layout.n_s, spec.layout.n_t
    per_step = int(np.rint(cfg.obs_per_timestep_ratio * ns))
    sites = np.concatenate([rng.integers(0, ns, size=per_step) for _ in range(nt)])
    steps = np.repeat(np.arange(nt), per_step)
    n_o = per_step * nt
    Z = _covariates(sites, cfg.rows, cfg.cols, cfg.n_b, rng)
    # noise sd as exp(-log_tau/2): underflows to an exact 0 for huge
    # precisions instead of overflowing tau itself
    eps = rng.standard_normal(n_o) * np.exp(-0.5 * cfg.theta_true.log_tau_y)
    cols_a = steps * ns + sites
    y = Z @ beta + u[cols_a] + eps
    return Dataset(
        layout=spec.layout,
        y=y,
        a_rows=np.arange(n_o),
        a_cols=cols_a,
        a_vals=np.ones(n_o),
        Z=Z,
    )


def generate_dataset(cfg: SimConfig):
    """Build the lattice model at theta_true and emit one dataset.

    Returns (dataset, truth).  n_o = round(ratio * n_s) * n_t exactly,
    one unit weight per row, so the single-block rule holds by
    construction.
    """
    spec = build_lattice_spec(cfg.rows, cfg.cols, cfg.n_t, cfg.n_b)
    rng = np.random.default_rng(cfg.seed)
    beta = cfg.beta_true
    if beta is None:
        beta = rng.uniform(-5.0, 5.0, size=cfg.n_b)
    L = bta_factorize(assemble_prior_precision(spec, cfg.theta_true))
    x = sample_gmrf(L, rng)
    u = x[: spec.layout.n_s * spec.layout.n_t]
    data = _observe(spec, cfg, u, beta, rng)
    return data, TruthRecord(theta=cfg.theta_true, beta=beta, u=u)
