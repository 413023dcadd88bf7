"""Model assembly: prior and conditional precision matrices in BTA form.

The latent field couples a spatial operator pair (lumped mass C,
stiffness G) with a temporal random-walk precision J through a
Kronecker sum,

    Q_st(theta) = gamma_u * ( gamma_t * (J kron C) + I kron K(gamma_s) ),
    K(gamma_s)  = gamma_s^2 * C + G,

which is SPD for every hyperparameter value (C > 0, G and J PSD) and
has exactly the BTA sparsity: J is tridiagonal, so time block i couples
only to i-1 and i+1.  Fixed effects get an independent Gaussian prior
in the arrow tip.  Observations enter through a sparse projection A
(each row confined to one time block) and a dense covariate matrix Z.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .bta import BtaLayout, BtaMatrix, DimensionMismatch


class BandwidthViolation(Exception):
    """An observation row couples latent nodes from different time blocks,
    which would widen the BTA bandwidth of A^T A."""

    def __init__(self, row):
        self.row = row
        super().__init__(f"observation row {row} spans more than one time block")


@dataclass(frozen=True)
class HyperParameters:
    """The 4-vector theta, log scale throughout (optimization is unconstrained)."""

    log_tau_y: float
    log_gamma_s: float
    log_gamma_t: float
    log_gamma_u: float

    def __post_init__(self):
        if not np.isfinite(self.to_array()).all():
            raise ValueError("hyperparameters must be finite")

    @classmethod
    def from_array(cls, vec) -> "HyperParameters":
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (4,):
            raise DimensionMismatch(f"theta must have 4 components, got {v.shape}")
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.log_tau_y, self.log_gamma_s, self.log_gamma_t, self.log_gamma_u]
        )

    @property
    def tau_y(self) -> float:
        return float(np.exp(self.log_tau_y))


HYPERPARAMETER_NAMES = ("tau_y", "gamma_s", "gamma_t", "gamma_u")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable operators of the latent model.

    C_diag: positive lumped-mass diagonal (n_s,)
    G:      symmetric PSD stiffness / graph Laplacian (n_s, n_s), zero row sums
    J:      symmetric PSD tridiagonal temporal precision (n_t, n_t), zero row sums
    """

    layout: BtaLayout
    C_diag: np.ndarray
    G: np.ndarray
    J: np.ndarray
    prior_precision_fixed: float
    smoothness_orders: tuple = (1, 2, 1)

    def __post_init__(self):
        ns, nt = self.layout.n_s, self.layout.n_t
        object.__setattr__(self, "C_diag", np.asarray(self.C_diag, dtype=np.float64))
        object.__setattr__(self, "G", np.asarray(self.G, dtype=np.float64))
        object.__setattr__(self, "J", np.asarray(self.J, dtype=np.float64))
        if self.C_diag.shape != (ns,) or self.G.shape != (ns, ns):
            raise DimensionMismatch("spatial operator shapes do not match layout")
        if self.J.shape != (nt, nt):
            raise DimensionMismatch("temporal operator shape does not match layout")
        if not (self.C_diag > 0).all():
            raise ValueError("lumped mass diagonal must be strictly positive")
        scale = max(float(np.abs(self.G).max()), 1.0)
        if np.abs(self.G - self.G.T).max() > 1e-12 * scale:
            raise ValueError("G must be symmetric")
        if np.abs(self.G.sum(axis=1)).max() > 1e-10 * scale:
            raise ValueError("G must have zero row sums")
        jscale = max(float(np.abs(self.J).max()), 1.0)
        if np.abs(self.J - self.J.T).max() > 1e-12 * jscale:
            raise ValueError("J must be symmetric")
        if np.abs(self.J.sum(axis=1)).max() > 1e-10 * jscale:
            raise ValueError("J must have zero row sums")
        if nt > 2 and np.abs(np.triu(self.J, 2)).max() > 0:
            raise ValueError("J must be tridiagonal")
        if self.prior_precision_fixed <= 0:
            raise ValueError("fixed-effect prior precision must be positive")


@dataclass(frozen=True)
class _DataGram:
    """theta-independent scatter of the observation operator.

    ata[i] is the (i,i) block of A^T A (single-time-block rule means no
    off-diagonal blocks exist), zta[i] the Z^T A slice feeding arrow
    block i, ztz the tip increment, and aty = [A^T y; Z^T y] the full
    right-hand-side direction.
    """

    ata: np.ndarray
    zta: np.ndarray
    ztz: np.ndarray
    aty: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Observations y with sparse projection A (triplets) and covariates Z."""

    layout: BtaLayout
    y: np.ndarray
    a_rows: np.ndarray
    a_cols: np.ndarray
    a_vals: np.ndarray
    Z: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.a_rows = np.asarray(self.a_rows, dtype=np.int64).reshape(-1)
        self.a_cols = np.asarray(self.a_cols, dtype=np.int64).reshape(-1)
        self.a_vals = np.asarray(self.a_vals, dtype=np.float64).reshape(-1)
        if self.Z is None:
            self.Z = np.zeros((len(self.y), self.layout.n_b))
        self.Z = np.asarray(self.Z, dtype=np.float64)
        n_o = len(self.y)
        if not (len(self.a_rows) == len(self.a_cols) == len(self.a_vals)):
            raise DimensionMismatch("A triplet arrays must have equal length")
        if self.Z.shape != (n_o, self.layout.n_b):
            raise DimensionMismatch(
                f"Z has shape {self.Z.shape}, expected {(n_o, self.layout.n_b)}"
            )
        if len(self.a_rows) and (
            self.a_rows.min() < 0
            or self.a_rows.max() >= n_o
            or self.a_cols.min() < 0
            or self.a_cols.max() >= self.layout.n_s * self.layout.n_t
        ):
            raise DimensionMismatch("A triplet indices out of range")
        for name, arr in (("y", self.y), ("A values", self.a_vals), ("Z", self.Z)):
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n_o(self) -> int:
        return len(self.y)

    @cached_property
    def gram(self) -> _DataGram:
        """Build the precomputed scatter blocks; raises BandwidthViolation."""
        ns, nt, nb = self.layout.n_s, self.layout.n_t, self.layout.n_b
        n_o = self.n_o
        blk = self.a_cols // ns
        bmin = np.full(n_o, nt, dtype=np.int64)
        bmax = np.full(n_o, -1, dtype=np.int64)
        np.minimum.at(bmin, self.a_rows, blk)
        np.maximum.at(bmax, self.a_rows, blk)
        present = bmax >= 0
        bad = present & (bmin != bmax)
        if bad.any():
            raise BandwidthViolation(int(np.nonzero(bad)[0][0]))
        A = sp.coo_matrix(
            (self.a_vals, (self.a_rows, self.a_cols)), shape=(n_o, ns * nt)
        ).tocsc()
        ata = np.empty((nt, ns, ns))
        zta = np.empty((nt, nb, ns))
        for t in range(nt):
            At = A[:, t * ns : (t + 1) * ns]
            ata[t] = (At.T @ At).toarray()
            zta[t] = np.asarray(At.T @ self.Z).T
        aty = np.concatenate([A.T @ self.y, self.Z.T @ self.y])
        return _DataGram(ata=ata, zta=zta, ztz=self.Z.T @ self.Z, aty=aty)

    def predict(self, x) -> np.ndarray:
        """[A, Z] @ x for a latent vector x of length n."""
        ns, nt = self.layout.n_s, self.layout.n_t
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.layout.n,):
            raise DimensionMismatch(f"x has shape {x.shape}, expected ({self.layout.n},)")
        u = x[: ns * nt]
        out = np.bincount(
            self.a_rows, weights=self.a_vals * u[self.a_cols], minlength=self.n_o
        ).astype(np.float64)
        return out + self.Z @ x[ns * nt :]


# ---------------------------------------------------------------------------
# assembly


def assemble_prior_precision(spec: ModelSpec, theta: HyperParameters) -> BtaMatrix:
    """Q_x(theta): Kronecker-sum spatial-temporal part, fixed-effect tip, F = 0."""
    ns, nt, nb = spec.layout.n_s, spec.layout.n_t, spec.layout.n_b
    gs = np.exp(theta.log_gamma_s)
    gt = np.exp(theta.log_gamma_t)
    gu = np.exp(theta.log_gamma_u)
    C = np.diag(spec.C_diag)
    K = gs * gs * C + spec.G
    jd = np.diagonal(spec.J).copy()
    D = gu * (gt * jd[:, None, None] * C[None, :, :] + K[None, :, :])
    if nt > 1:
        js = np.diagonal(spec.J, -1).copy()
        E = (gu * gt) * js[:, None, None] * C[None, :, :]
    else:
        E = np.zeros((0, ns, ns))
    F = np.zeros((nt, nb, ns))
    T = spec.prior_precision_fixed * np.eye(nb)
    return BtaMatrix(spec.layout, D, E, F, T)


def assemble_conditional_precision(
    Q_x: BtaMatrix, data: Dataset, theta: HyperParameters
) -> BtaMatrix:
    """Q_{x|y} = Q_x + tau_y * [A, Z]^T [A, Z], scattered blockwise.

    A^T A lands on the D blocks only (single-time-block rule), Z^T A on
    the arrow row, Z^T Z on the tip; the subdiagonal band is untouched,
    so the sparsity pattern never widens.
    """
    if data.layout != Q_x.layout:
        raise DimensionMismatch("dataset layout does not match the precision layout")
    tau = theta.tau_y
    g = data.gram
    return BtaMatrix(
        Q_x.layout,
        Q_x.D + tau * g.ata,
        Q_x.E,
        Q_x.F + tau * g.zta,
        Q_x.T + tau * g.ztz,
    )


def conditional_mean_rhs(data: Dataset, theta: HyperParameters) -> np.ndarray:
    """b = tau_y * [A, Z]^T y; the conditional mean solves Q_{x|y} x* = b."""
    return theta.tau_y * data.gram.aty


def build_lattice_spec(
    rows: int, cols: int, n_t: int, n_b: int, prior_precision_fixed: float = 1.0
) -> ModelSpec:
    """Desk-scale stand-in mesh: 4-neighbor lattice Laplacian G, unit lumped
    mass, path-graph temporal Laplacian J."""
    if rows < 1 or cols < 1:
        raise ValueError("lattice must have at least one row and column")
    ns = rows * cols
    G = np.zeros((ns, ns))
    for r in range(rows):
        for c in range(cols):
            s = r * cols + c
            for rr, cc in ((r + 1, c), (r, c + 1)):
                if rr < rows and cc < cols:
                    t = rr * cols + cc
                    G[s, s] += 1.0
                    G[t, t] += 1.0
                    G[s, t] -= 1.0
                    G[t, s] -= 1.0
    J = np.zeros((n_t, n_t))
    if n_t > 1:
        idx = np.arange(n_t)
        J[idx, idx] = 2.0
        J[0, 0] = J[-1, -1] = 1.0
        J[idx[:-1], idx[:-1] + 1] = -1.0
        J[idx[:-1] + 1, idx[:-1]] = -1.0
    return ModelSpec(
        layout=BtaLayout(ns, n_t, n_b),
        C_diag=np.ones(ns),
        G=G,
        J=J,
        prior_precision_fixed=prior_precision_fixed,
    )
