"""The inference pipeline: objective, mode search, Hessian, marginals.

The objective is the negative log posterior density of theta up to the
evidence constant.  With a Gaussian likelihood the inner Laplace
approximation is exact and, after the (n/2) log 2pi terms cancel,

    f(theta) = -log p(theta)
               - 1/2 log det Q_x + 1/2 x*' Q_x x*
               + (n_o/2) (log 2pi - log tau_y) + (tau_y/2) ||y - [A,Z] x*||^2
               + 1/2 log det Q_{x|y}

with x* the conditional mean.  All constants are kept so the value
equals the true negative log joint density and dense references match
absolutely, not merely up to a shift.

The prior path (numerator) and the conditional path (denominator) are
separable pure functions; the orchestrator may run them as independent
subtasks and combine here in the parent, which keeps single-worker and
pooled runs bitwise identical.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from threadpoolctl import threadpool_limits

from .bta import (
    BtaFactor,
    NotPositiveDefinite,
    bta_factorize,
    bta_logdet,
    bta_matvec,
    bta_selected_inverse,
    bta_solve,
    selected_inverse_diagonal,
)
from .model import (
    HYPERPARAMETER_NAMES,
    HyperParameters,
    assemble_conditional_precision,
    assemble_prior_precision,
    conditional_mean_rhs,
)
from .parallel import (
    STAGE_ASSEMBLY,
    STAGE_FACTOR_COND,
    STAGE_FACTOR_PRIOR,
    STAGE_OTHER,
    STAGE_SELINV,
    STAGE_SOLVE,
    ObjectivePool,
    StageTimers,
    TaskPlan,
)

LOG_2PI = math.log(2.0 * math.pi)


class LineSearchFailure(Exception):
    """No acceptable step found; carries the optimizer trace so far."""

    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)


class HessianNotPD(Exception):
    """The finite-difference Hessian at the candidate mode is not SPD."""


@dataclass(frozen=True)
class PriorConfig:
    """Independent Gaussian priors on the log-scale hyperparameters."""

    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "sds", np.asarray(self.sds, dtype=np.float64))
        if self.means.shape != (4,) or self.sds.shape != (4,):
            raise ValueError("prior means and sds must have 4 components")
        if not (self.sds > 0).all():
            raise ValueError("prior sds must be positive")


def log_prior_theta(theta, prior: PriorConfig | None) -> float:
    """Sum of Gaussian log densities; None means an improper flat prior."""
    if prior is None:
        return 0.0
    v = theta.to_array() if isinstance(theta, HyperParameters) else np.asarray(theta)
    z = (v - prior.means) / prior.sds
    return float(-0.5 * z @ z - np.log(prior.sds).sum() - 2.0 * LOG_2PI)


@dataclass(frozen=True)
class ObjectiveComponents:
    log_prior_theta: float
    log_prior_latent: float
    log_likelihood: float
    log_det_conditional: float
    quadratic_terms: float


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    components: ObjectiveComponents | None = None
    failure: str | None = None


@dataclass
class GaussianApprox:
    """The Gaussian approximation to p(x | theta, y), centered at x*."""

    theta: HyperParameters
    mean: np.ndarray
    factor: BtaFactor


# ---------------------------------------------------------------------------
# objective evaluation, split into pure numerator/denominator parts


def evaluate_parts(spec, data, theta_vec, kind):
    """Compute the requested objective parts at one theta.

    kind is "prior", "conditional" or "both".  Returns
    ("ok", parts_dict, stage_snapshot) or ("fail", message,
    stage_snapshot); never raises, so pooled batches survive bad
    iterates.  BLAS is pinned to one thread for bitwise reproducibility
    across worker counts.
    """
    timers = StageTimers()
    body = {}
    try:
        # overflow at extreme theta produces non-finite blocks which the
        # matrix validation turns into a failure payload; no need to warn
        with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
            theta = HyperParameters.from_array(theta_vec)
            Q_x = None
            if kind in ("prior", "both"):
                with timers.timed(STAGE_ASSEMBLY):
                    Q_x = assemble_prior_precision(spec, theta)
                with timers.timed(STAGE_FACTOR_PRIOR):
                    L = bta_factorize(Q_x)
                body["logdet_prior"] = bta_logdet(L)
            if kind in ("conditional", "both"):
                with timers.timed(STAGE_ASSEMBLY):
                    if Q_x is None:
                        Q_x = assemble_prior_precision(spec, theta)
                    Q_c = assemble_conditional_precision(Q_x, data, theta)
                    rhs = conditional_mean_rhs(data, theta)
                with timers.timed(STAGE_FACTOR_COND):
                    L_c = bta_factorize(Q_c)
                with timers.timed(STAGE_SOLVE):
                    x_star = bta_solve(L_c, rhs)
                body["logdet_cond"] = bta_logdet(L_c)
                body["quad_prior"] = float(x_star @ bta_matvec(Q_x, x_star))
                r = data.y - data.predict(x_star)
                body["sse"] = float(r @ r)
        return ("ok", body, timers.snapshot())
    except NotPositiveDefinite as exc:
        return ("fail", str(exc), timers.snapshot())
    except Exception as exc:  # surface as +inf, never abort the batch
        return ("fail", f"{type(exc).__name__}: {exc}", timers.snapshot())


def combine_objective(theta_vec, prior, data, payload_a, payload_b=None) -> ObjectiveValue:
    """Assemble an ObjectiveValue from part payloads (pure float math)."""
    parts = {}
    failure = None
    for payload in (payload_a, payload_b):
        if payload is None:
            continue
        status, body, _ = payload
        if status == "ok":
            parts.update(body)
        elif failure is None:
            failure = body
    if failure is not None:
        return ObjectiveValue(value=math.inf, failure=failure)

    log_tau = float(theta_vec[0])
    tau = math.exp(log_tau)
    n = data.layout.n
    n_o = data.n_o
    lp_theta = log_prior_theta(theta_vec, prior)
    log_prior_latent = (
        0.5 * parts["logdet_prior"] - 0.5 * n * LOG_2PI - 0.5 * parts["quad_prior"]
    )
    log_likelihood = 0.5 * n_o * (log_tau - LOG_2PI) - 0.5 * tau * parts["sse"]
    log_pg_at_mode = 0.5 * parts["logdet_cond"] - 0.5 * n * LOG_2PI
    value = -(lp_theta + log_prior_latent + log_likelihood) + log_pg_at_mode
    if not math.isfinite(value):
        return ObjectiveValue(value=math.inf, failure="objective value is not finite")
    return ObjectiveValue(
        value=float(value),
        components=ObjectiveComponents(
            log_prior_theta=lp_theta,
            log_prior_latent=log_prior_latent,
            log_likelihood=log_likelihood,
            log_det_conditional=parts["logdet_cond"],
            quadratic_terms=parts["quad_prior"] + tau * parts["sse"],
        ),
    )


def _theta_vec(theta) -> np.ndarray:
    if isinstance(theta, HyperParameters):
        return theta.to_array()
    return np.asarray(theta, dtype=np.float64)


def eval_objective(spec, data, theta, prior=None) -> ObjectiveValue:
    """f(theta); +inf (with the cause recorded) off the SPD region."""
    vec = _theta_vec(theta)
    return combine_objective(vec, prior, data, evaluate_parts(spec, data, vec, "both"))


def gaussian_approximation(spec, data, theta) -> GaussianApprox:
    """Factorize Q_{x|y}(theta) and solve for the conditional mean x*."""
    th = HyperParameters.from_array(_theta_vec(theta))
    Q_x = assemble_prior_precision(spec, th)
    Q_c = assemble_conditional_precision(Q_x, data, th)
    L_c = bta_factorize(Q_c)
    mean = bta_solve(L_c, conditional_mean_rhs(data, th))
    return GaussianApprox(theta=th, mean=mean, factor=L_c)


# ---------------------------------------------------------------------------
# finite differences (batched, so stencil points fan out as tasks)


def _gradient_points(x, h):
    pts = [x.copy()]
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        pts.extend((xp, xm))
    return pts


def fd_gradient_batched(f_batch, x, h) -> np.ndarray:
    """Central differences from one batched evaluation of 2d+1 points
    (the center value rides along for the caller)."""
    x = np.asarray(x, dtype=np.float64)
    vals = f_batch(_gradient_points(x, h))
    d = len(x)
    g = np.empty(d)
    for i in range(d):
        g[i] = (vals[1 + 2 * i] - vals[2 + 2 * i]) / (2.0 * h)
    return g


def fd_hessian_batched(f_batch, x, h) -> np.ndarray:
    """Second-order central stencil, 2d^2+1 points batched at once."""
    x = np.asarray(x, dtype=np.float64)
    d = len(x)
    pts = [x.copy()]
    for i in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        pts.extend((xp, xm))
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    for i, j in pairs:
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            xq = x.copy()
            xq[i] += si * h
            xq[j] += sj * h
            pts.append(xq)
    vals = f_batch(pts)
    f0 = vals[0]
    H = np.empty((d, d))
    for i in range(d):
        H[i, i] = (vals[1 + 2 * i] + vals[2 + 2 * i] - 2.0 * f0) / (h * h)
    base = 1 + 2 * d
    for k, (i, j) in enumerate(pairs):
        v = vals[base + 4 * k : base + 4 * k + 4]
        H[i, j] = H[j, i] = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h * h)
    return (H + H.T) / 2.0


def _pool_batch_eval(pool: ObjectivePool):
    def f_batch(points):
        return [v.value for v in pool.map(points)]

    return f_batch


def gradient_fd(spec, data, theta, h=1e-5, prior=None, plan=None, pool=None) -> np.ndarray:
    """FD gradient of the objective; the 2d+1 evaluations run as one batch."""
    if pool is not None:
        return fd_gradient_batched(_pool_batch_eval(pool), _theta_vec(theta), h)
    with ObjectivePool(spec, data, prior, plan) as p:
        return fd_gradient_batched(_pool_batch_eval(p), _theta_vec(theta), h)


def hessian_fd(spec, data, theta_star, h=1e-3, prior=None, plan=None, pool=None) -> np.ndarray:
    """FD Hessian at the mode (4-point cross stencil, symmetrized)."""
    if pool is not None:
        return fd_hessian_batched(_pool_batch_eval(pool), _theta_vec(theta_star), h)
    with ObjectivePool(spec, data, prior, plan) as p:
        return fd_hessian_batched(_pool_batch_eval(p), _theta_vec(theta_star), h)


# ---------------------------------------------------------------------------
# BFGS mode search


@dataclass(frozen=True)
class FitOptions:
    fd_step_gradient: float = 1e-5
    fd_step_hessian: float = 1e-3
    max_iter: int = 200
    tol_grad: float = 1e-3
    tol_f_rel: float = 1e-7
    c1: float = 1e-4
    c2: float = 0.9
    max_backtracks: int = 30


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    f: float
    grad_norm: float
    step: float


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    trace: list
    converged: bool
    iterations: int
    n_evals: int


def minimize_bfgs_batched(f_batch, x0, opts: FitOptions | None = None) -> BfgsResult:
    """BFGS with FD gradients and backtracking line search.

    Sufficient decrease (c1) drives backtracking; a non-finite trial
    value counts as a rejected step and halves alpha.  The curvature
    condition (c2) gates the inverse-Hessian update instead of forcing
    step expansion, which keeps f non-increasing across accepted
    iterates.  Convergence needs the gradient norm AND the relative f
    change below tolerance on the same iteration.
    """
    opts = opts if opts is not None else FitOptions()
    x = np.asarray(x0, dtype=np.float64).copy()
    d = len(x)
    trace: list[TraceRow] = []
    n_evals = 0

    def batch(pts):
        nonlocal n_evals
        n_evals += len(pts)
        return [float(v) for v in f_batch(pts)]

    def grad(xc):
        pts = _gradient_points(xc, opts.fd_step_gradient)[1:]
        vals = batch(pts)
        return np.array(
            [(vals[2 * i] - vals[2 * i + 1]) / (2.0 * opts.fd_step_gradient) for i in range(d)]
        )

    if opts.max_iter == 0:
        return BfgsResult(x, math.nan, math.nan, [], False, 0, 0)

    f0 = batch([x])[0]
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")
    g = grad(x)
    if not np.isfinite(g).all():
        raise LineSearchFailure("gradient is not finite at the starting point", trace)

    H = np.eye(d)
    converged = False
    for k in range(1, opts.max_iter + 1):
        p = -(H @ g)
        slope = float(g @ p)
        if slope >= 0.0:
            H = np.eye(d)
            p = -g
            slope = float(g @ p)
        alpha = 1.0
        accepted = None
        for _ in range(opts.max_backtracks + 1):
            cand = x + alpha * p
            fc = batch([cand])[0]
            if math.isfinite(fc) and fc <= f0 + opts.c1 * alpha * slope:
                accepted = (cand, fc)
                break
            alpha *= 0.5
        if accepted is None:
            raise LineSearchFailure(
                f"no acceptable step within {opts.max_backtracks} backtracks "
                f"at iteration {k}",
                trace,
            )
        xt, ft = accepted
        gt = grad(xt)
        if not np.isfinite(gt).all():
            raise LineSearchFailure(
                f"gradient is not finite at the accepted iterate of iteration {k}",
                trace,
            )
        s = xt - x
        yv = gt - g
        sy = float(s @ yv)
        curvature_ok = float(gt @ p) >= opts.c2 * slope
        if curvature_ok and sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(d) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        gnorm = float(np.linalg.norm(gt))
        rel_df = abs(f0 - ft) / max(1.0, abs(ft))
        trace.append(TraceRow(k, ft, gnorm, alpha))
        x, f0, g = xt, ft, gt
        if gnorm <= opts.tol_grad and rel_df <= opts.tol_f_rel:
            converged = True
            break
    return BfgsResult(
        x=x,
        f=f0,
        grad_norm=float(np.linalg.norm(g)),
        trace=trace,
        converged=converged,
        iterations=len(trace),
        n_evals=n_evals,
    )


def bfgs_minimize(spec, data, theta0, opts=None, prior=None, plan=None, pool=None) -> BfgsResult:
    """Mode search for the real objective; evaluations fan out on the pool."""
    if pool is not None:
        return minimize_bfgs_batched(_pool_batch_eval(pool), _theta_vec(theta0), opts)
    with ObjectivePool(spec, data, prior, plan) as p:
        return minimize_bfgs_batched(_pool_batch_eval(p), _theta_vec(theta0), opts)


# ---------------------------------------------------------------------------
# marginals


@dataclass(frozen=True)
class HyperMarginal:
    name: str
    mode_log: float
    sd_log: float
    mode_natural: float


def hyperparam_marginals(theta_star, neg_hessian) -> list[HyperMarginal]:
    """Gaussian sds from the inverse of the negative Hessian at the mode."""
    vec = _theta_vec(theta_star)
    try:
        cf = cho_factor(np.asarray(neg_hessian, dtype=np.float64), lower=True)
    except LinAlgError as exc:
        raise HessianNotPD("negative Hessian at the mode is not SPD") from exc
    cov = cho_solve(cf, np.eye(len(vec)))
    sds = np.sqrt(np.diag(cov))
    return [
        HyperMarginal(name, float(m), float(s), float(np.exp(m)))
        for name, m, s in zip(HYPERPARAMETER_NAMES, vec, sds)
    ]


def latent_marginals(spec, data, theta_star, plan: TaskPlan | None = None):
    """Empirical-Bayes latent summaries at the mode.

    Means from the conditional mean solve, sds as square roots of the
    diagonal of the selected inverse of Q_{x|y}(theta*).
    """
    timers = plan.stage_timers if plan is not None else StageTimers()
    th = HyperParameters.from_array(_theta_vec(theta_star))
    with threadpool_limits(limits=1):
        with timers.timed(STAGE_ASSEMBLY):
            Q_x = assemble_prior_precision(spec, th)
            Q_c = assemble_conditional_precision(Q_x, data, th)
            rhs = conditional_mean_rhs(data, th)
        with timers.timed(STAGE_FACTOR_COND):
            L_c = bta_factorize(Q_c)
        with timers.timed(STAGE_SOLVE):
            means = bta_solve(L_c, rhs)
        with timers.timed(STAGE_SELINV):
            S = bta_selected_inverse(L_c)
    sds = np.sqrt(selected_inverse_diagonal(S))
    return means, sds


def ring_points(theta_star, neg_hessian, k_points=1) -> list[np.ndarray]:
    """Exploration points theta* +- k*delta_i v_i along Hessian eigenvectors,
    with delta_i = 2/sqrt(lambda_i) so the first ring sits at Delta f ~ 2."""
    vec = _theta_vec(theta_star)
    w, V = np.linalg.eigh(np.asarray(neg_hessian, dtype=np.float64))
    if (w <= 0).any():
        raise HessianNotPD("negative Hessian at the mode is not SPD")
    pts = []
    for i in range(len(vec)):
        delta = 2.0 / math.sqrt(w[i])
        for k in range(1, k_points + 1):
            pts.append(vec + k * delta * V[:, i])
            pts.append(vec - k * delta * V[:, i])
    return pts


def explore_theta_grid(
    spec, data, theta_star, neg_hessian, k_points=1, prior=None, plan=None, pool=None
):
    """Evaluate f on rings around the mode; failed points record +inf."""
    pts = ring_points(theta_star, neg_hessian, k_points)
    if pool is not None:
        vals = pool.map(pts)
    else:
        with ObjectivePool(spec, data, prior, plan) as p:
            vals = p.map(pts)
    return [(pt, v.value) for pt, v in zip(pts, vals)]


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class Diagnostics:
    converged: bool
    iterations: int
    function_evaluations: int
    final_gradient_norm: float
    hessian_not_pd: bool
    wall_seconds: float
    stage_seconds: dict


@dataclass
class InferenceReport:
    theta_mode: HyperParameters
    neg_hessian: np.ndarray
    hyper_marginals: list
    latent_means: np.ndarray
    latent_sds: np.ndarray
    trace: list
    diagnostics: Diagnostics


def run_inference(spec, data, prior, theta0, opts=None, plan=None) -> InferenceReport:
    """Mode search, FD Hessian, hyperparameter and latent marginals."""
    opts = opts if opts is not None else FitOptions()
    plan = plan if plan is not None else TaskPlan()
    t0 = time.perf_counter()
    with ObjectivePool(spec, data, prior, plan) as pool:
        res = bfgs_minimize(spec, data, theta0, opts, prior=prior, pool=pool)
        theta_star = HyperParameters.from_array(res.x)
        neg_hessian = hessian_fd(
            spec, data, theta_star, h=opts.fd_step_hessian, pool=pool
        )
        hessian_not_pd = bool(np.linalg.eigvalsh(neg_hessian).min() <= 0)
        try:
            marginals = hyperparam_marginals(theta_star, neg_hessian)
        except HessianNotPD:
            vec = res.x
            marginals = [
                HyperMarginal(name, float(m), math.nan, float(np.exp(m)))
                for name, m in zip(HYPERPARAMETER_NAMES, vec)
            ]
        means, sds = latent_marginals(spec, data, theta_star, plan)
        n_evals = pool.evaluations
    wall = time.perf_counter() - t0
    other = max(0.0, wall - plan.stage_timers.total())
    plan.stage_timers.add(STAGE_OTHER, other)
    return InferenceReport(
        theta_mode=theta_star,
        neg_hessian=neg_hessian,
        hyper_marginals=marginals,
        latent_means=means,
        latent_sds=sds,
        trace=res.trace,
        diagnostics=Diagnostics(
            converged=res.converged,
            iterations=res.iterations,
            function_evaluations=n_evals,
            final_gradient_norm=res.grad_norm,
            hessian_not_pd=hessian_not_pd,
            wall_seconds=wall,
            stage_seconds=plan.stage_timers.snapshot(),
        ),
    )
