"""Dense reference implementations.

Everything here recomputes a quantity the structured code produces, but
through plain dense linear algebra (numpy.linalg on the fully assembled
matrix) or through a brute-force formula.  These are the comparison
targets for the test suite and for the `selftest` subcommand; none of
them is used on the structured execution path.
"""
from __future__ import annotations

import numpy as np

from .bta import BtaLayout, BtaMatrix, bta_to_dense

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# random SPD BTA instances with controlled condition number


def random_spd_bta(layout: BtaLayout, rng, condition=1e6) -> BtaMatrix:
    """Seeded random SPD matrix in the BTA pattern.

    Random symmetric blocks are shifted by the multiple of the identity
    that places the spectrum at exactly the requested condition number
    (checked by eigendecomposition of the dense assembly, so keep n
    modest).
    """
    ns, nt, nb = layout.n_s, layout.n_t, layout.n_b
    D = rng.standard_normal((nt, ns, ns))
    D = (D + D.transpose(0, 2, 1)) / 2.0
    E = rng.standard_normal((max(nt - 1, 0), ns, ns))
    F = rng.standard_normal((nt, nb, ns))
    T = rng.standard_normal((nb, nb))
    T = (T + T.T) / 2.0
    Q = BtaMatrix(layout, D, E, F, T)
    w = np.linalg.eigvalsh(bta_to_dense(Q))
    spread = w[-1] - w[0]
    if spread < 1e-12 * max(1.0, abs(w[-1])):
        # degenerate spectrum (e.g. 1x1): any positive shift works
        s = 1.0 - w[0]
    else:
        # shift s solves (w_max + s) = condition * (w_min + s)
        s = (w[-1] - condition * w[0]) / (condition - 1.0)
    idx = np.arange(ns)
    Q.D[:, idx, idx] += s
    if nb:
        ti = np.arange(nb)
        Q.T[ti, ti] += s
    return Q


def dense_logdet(a: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(a)
    if sign <= 0:
        raise ValueError("matrix is not positive definite")
    return float(val)


def dense_selected_blocks(dense_inv: np.ndarray, layout: BtaLayout):
    """Slice a full dense inverse into (S_diag, S_arrow, S_tip) stacks."""
    ns, nt, nb = layout.n_s, layout.n_t, layout.n_b
    S_diag = np.empty((nt, ns, ns))
    S_arrow = np.empty((nt, nb, ns))
    for i in range(nt):
        r = i * ns
        S_diag[i] = dense_inv[r : r + ns, r : r + ns]
        S_arrow[i] = dense_inv[ns * nt :, r : r + ns]
    S_tip = dense_inv[ns * nt :, ns * nt :].copy()
    return S_diag, S_arrow, S_tip


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product, the reference for the gemm kernel."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# dense model assembly (independent of the block-structured assembly code)


def dense_prior_precision(spec, theta) -> np.ndarray:
    """Q_x by brute-force Kronecker sum: gu*(gt*(J kron C) + I kron K)."""
    gs = np.exp(theta.log_gamma_s)
    gt = np.exp(theta.log_gamma_t)
    gu = np.exp(theta.log_gamma_u)
    C = np.diag(spec.C_diag)
    K = gs * gs * C + spec.G
    nt = spec.layout.n_t
    nb = spec.layout.n_b
    Qst = gu * (gt * np.kron(spec.J, C) + np.kron(np.eye(nt), K))
    n = spec.layout.n
    out = np.zeros((n, n))
    out[: n - nb, : n - nb] = Qst
    out[n - nb :, n - nb :] = spec.prior_precision_fixed * np.eye(nb)
    return out


def dense_projection(data) -> np.ndarray:
    """The full dense [A, Z] observation matrix from the triplet form."""
    ns, nt, nb = data.layout.n_s, data.layout.n_t, data.layout.n_b
    n_o = len(data.y)
    out = np.zeros((n_o, data.layout.n))
    np.add.at(out, (data.a_rows, data.a_cols), data.a_vals)
    out[:, ns * nt :] = data.Z
    return out


def dense_log_prior_theta(theta_vec, prior) -> float:
    if prior is None:
        return 0.0
    acc = 0.0
    for v, m, s in zip(np.asarray(theta_vec), prior.means, prior.sds):
        acc += -0.5 * LOG_2PI - np.log(s) - 0.5 * ((v - m) / s) ** 2
    return float(acc)


def dense_objective(spec, data, theta, prior=None) -> float:
    """The objective recomputed with an all-dense pipeline."""
    tau = np.exp(theta.log_tau_y)
    n_o = len(data.y)
    Qx = dense_prior_precision(spec, theta)
    At = dense_projection(data)
    Qc = Qx + tau * (At.T @ At)
    b = tau * (At.T @ data.y)
    x = np.linalg.solve(Qc, b)
    r = data.y - At @ x
    theta_vec = np.array(
        [theta.log_tau_y, theta.log_gamma_s, theta.log_gamma_t, theta.log_gamma_u]
    )
    return float(
        -dense_log_prior_theta(theta_vec, prior)
        - 0.5 * dense_logdet(Qx)
        + 0.5 * (x @ (Qx @ x))
        + 0.5 * n_o * (LOG_2PI - theta.log_tau_y)
        + 0.5 * tau * (r @ r)
        + 0.5 * dense_logdet(Qc)
    )


def dense_marginal_likelihood_objective(spec, data, theta, prior=None) -> float:
    """Same objective via the exact Gaussian marginal y ~ N(0, S).

    S = Atilde Qx^-1 Atilde^T + I/tau.  Independent of the conditioning
    identity used everywhere else, so it cross-checks the whole
    derivation, not just the arithmetic.
    """
    tau = np.exp(theta.log_tau_y)
    n_o = len(data.y)
    Qx = dense_prior_precision(spec, theta)
    At = dense_projection(data)
    S = At @ np.linalg.solve(Qx, At.T) + np.eye(n_o) / tau
    theta_vec = np.array(
        [theta.log_tau_y, theta.log_gamma_s, theta.log_gamma_t, theta.log_gamma_u]
    )
    quad = float(data.y @ np.linalg.solve(S, data.y))
    return float(
        -dense_log_prior_theta(theta_vec, prior)
        + 0.5 * (n_o * LOG_2PI + dense_logdet(S) + quad)
    )


def dense_conditioning(spec, data, theta):
    """Posterior mean and per-coordinate sd by full dense inversion."""
    tau = np.exp(theta.log_tau_y)
    Qx = dense_prior_precision(spec, theta)
    At = dense_projection(data)
    Qc = Qx + tau * (At.T @ At)
    cov = np.linalg.inv(Qc)
    mean = cov @ (tau * (At.T @ data.y))
    return mean, np.sqrt(np.diag(cov))


# ---------------------------------------------------------------------------
# finite-difference reference


def richardson_gradient(f, x, h) -> np.ndarray:
    """Richardson-extrapolated central differences: (4 g(h/2) - g(h)) / 3."""

    def central(step):
        g = np.empty_like(x, dtype=np.float64)
        for i in range(len(x)):
            xp = x.copy()
            xm = x.copy()
            xp[i] += step
            xm[i] -= step
            g[i] = (f(xp) - f(xm)) / (2.0 * step)
        return g

    return (4.0 * central(h / 2.0) - central(h)) / 3.0


def ols_fit(X: np.ndarray, y: np.ndarray):
    """OLS estimates and standard errors (plain normal-equations route)."""
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(X.shape[0] - X.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X)))
    return beta, se
