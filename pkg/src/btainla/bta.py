"""Block tridiagonal arrowhead (BTA) linear algebra.

A BTA matrix has n_t diagonal blocks of size n_s x n_s, one subdiagonal
band of n_s x n_s blocks, and a trailing dense "arrow" row/column of
width n_b coupling every time block to the fixed effects.  Only the
lower block triangle is stored; diagonal blocks are authoritative in
their lower triangle.

Provided here: block Cholesky factorization, forward/backward block
substitution, log-determinant from the factor diagonal, and selected
inversion (diagonal blocks, arrow row, tip of the inverse; interior
off-diagonal blocks of the inverse are never formed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError
from scipy.linalg import cholesky as _dense_cholesky
from scipy.linalg import solve_triangular as _solve_triangular


class BtaError(Exception):
    pass


class NotPositiveDefinite(BtaError):
    """A dense block Cholesky hit a non-positive pivot.

    Recoverable by design: the inference layer maps this to an objective
    value of +inf instead of aborting.  block_index is the 0-based
    diagonal block (n_t denotes the arrow tip), or None when raised by
    the bare kernel.
    """

    def __init__(self, block_index=None):
        self.block_index = block_index
        if block_index is None:
            msg = "matrix block is not positive definite"
        else:
            msg = f"matrix is not positive definite at diagonal block {block_index}"
        super().__init__(msg)


class DimensionMismatch(BtaError):
    pass


# ---------------------------------------------------------------------------
# layout and container types


@dataclass(frozen=True)
class BtaLayout:
    """Block dimensions: n_t diagonal blocks of size n_s, arrow width n_b."""

    n_s: int
    n_t: int
    n_b: int

    def __post_init__(self):
        if self.n_s < 1 or self.n_t < 1 or self.n_b < 0:
            raise DimensionMismatch(
                f"invalid layout (n_s={self.n_s}, n_t={self.n_t}, n_b={self.n_b})"
            )

    @property
    def n(self) -> int:
        return self.n_s * self.n_t + self.n_b


def _check_stack(name, arr, shape):
    if arr.shape != shape:
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")


@dataclass
class BtaMatrix:
    """Lower block triangle of a symmetric BTA matrix.

    D: (n_t, n_s, n_s) diagonal blocks, lower triangle authoritative.
    E: (n_t-1, n_s, n_s) subdiagonal blocks, E[i] sits at block (i+1, i).
    F: (n_t, n_b, n_s) arrow row blocks.
    T: (n_b, n_b) arrow tip, lower triangle authoritative.
    """

    layout: BtaLayout
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        ns, nt, nb = self.layout.n_s, self.layout.n_t, self.layout.n_b
        shapes = {
            "D": (nt, ns, ns),
            "E": (max(nt - 1, 0), ns, ns),
            "F": (nt, nb, ns),
            "T": (nb, nb),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise DimensionMismatch(
                    f"{name} has {arr.size} entries, expected shape {shape}"
                )
            arr = arr.reshape(shape)
            _check_stack(name, arr, shape)
            setattr(self, name, arr)


@dataclass
class BtaFactor:
    """Lower-triangular block Cholesky factor, same block layout as the input."""

    layout: BtaLayout
    L_D: np.ndarray
    L_E: np.ndarray
    L_F: np.ndarray
    L_T: np.ndarray


@dataclass
class SelectedInverse:
    """Selected blocks of the inverse: diagonal blocks, arrow row, tip.

    Interior off-diagonal blocks of the inverse are not represented at
    all; that is the point of selected inversion.
    """

    layout: BtaLayout
    S_diag: np.ndarray
    S_arrow: np.ndarray
    S_tip: np.ndarray


# ---------------------------------------------------------------------------
# dense block kernels


def dense_chol(block, block_index=None):
    """Lower Cholesky factor of one dense symmetric block.

    Reads only the lower triangle.  Raises NotPositiveDefinite on a
    non-positive pivot; the exception is meant to be caught.
    """
    a = np.asarray(block, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square block, got shape {a.shape}")
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return _dense_cholesky(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(block_index) from exc


def dense_tri_solve(lo, b, trans=False, side="left"):
    """Solve a triangular block system with a lower-triangular lo.

    side="left":  op(lo) @ X = b
    side="right": X @ op(lo) = b
    where op(lo) is lo.T when trans else lo.
    """
    lo = np.asarray(lo, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.size == 0 or lo.size == 0:
        return b.copy()
    if side == "left":
        return _solve_triangular(
            lo, b, lower=True, trans="T" if trans else "N", check_finite=False
        )
    if side == "right":
        # X @ op(lo) = b  <=>  op(lo).T @ X.T = b.T
        xt = _solve_triangular(
            lo, b.T, lower=True, trans="N" if trans else "T", check_finite=False
        )
        return np.ascontiguousarray(xt.T)
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def block_multiply_accumulate(c, a, b, transpose_a=False, transpose_b=False, sign=1.0):
    """c += sign * op(a) @ op(b), in place on c; returns c.

    Accumulation order is fixed by the dense gemm, so results are
    reproducible across runs at a fixed thread count.
    """
    oa = a.T if transpose_a else a
    ob = b.T if transpose_b else b
    if oa.shape[1] != ob.shape[0] or c.shape != (oa.shape[0], ob.shape[1]):
        raise DimensionMismatch(
            f"gemm shapes {c.shape} += {oa.shape} @ {ob.shape} are inconsistent"
        )
    if sign == 1.0:
        c += oa @ ob
    elif sign == -1.0:
        c -= oa @ ob
    else:
        c += sign * (oa @ ob)
    return c


# ---------------------------------------------------------------------------
# assembly helpers (definitional; used by tests, oracles and file I/O)


def _sym_from_lower(a):
    """Full symmetric block from its authoritative lower triangle."""
    lower = np.tril(a)
    return lower + np.swapaxes(np.tril(a, -1), -1, -2)


def bta_to_dense(Q: BtaMatrix) -> np.ndarray:
    """Assemble the full symmetric dense matrix (small instances only)."""
    ns, nt, nb = Q.layout.n_s, Q.layout.n_t, Q.layout.n_b
    n = Q.layout.n
    out = np.zeros((n, n))
    for i in range(nt):
        r = i * ns
        out[r : r + ns, r : r + ns] = _sym_from_lower(Q.D[i])
        if i + 1 < nt:
            out[r + ns : r + 2 * ns, r : r + ns] = Q.E[i]
            out[r : r + ns, r + ns : r + 2 * ns] = Q.E[i].T
        out[ns * nt :, r : r + ns] = Q.F[i]
        out[r : r + ns, ns * nt :] = Q.F[i].T
    out[ns * nt :, ns * nt :] = _sym_from_lower(Q.T)
    return out


def bta_factor_to_dense(L: BtaFactor) -> np.ndarray:
    """Assemble the full lower-triangular factor (small instances only)."""
    ns, nt, nb = L.layout.n_s, L.layout.n_t, L.layout.n_b
    n = L.layout.n
    out = np.zeros((n, n))
    for i in range(nt):
        r = i * ns
        out[r : r + ns, r : r + ns] = np.tril(L.L_D[i])
        if i + 1 < nt:
            out[r + ns : r + 2 * ns, r : r + ns] = L.L_E[i]
        out[ns * nt :, r : r + ns] = L.L_F[i]
    out[ns * nt :, ns * nt :] = np.tril(L.L_T)
    return out


def bta_matvec(Q: BtaMatrix, x: np.ndarray) -> np.ndarray:
    """y = Q @ x using the block structure (x of shape (n,) or (n, k))."""
    ns, nt, nb = Q.layout.n_s, Q.layout.n_t, Q.layout.n_b
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != Q.layout.n:
        raise DimensionMismatch(f"vector length {x.shape[0]} != n={Q.layout.n}")
    squeeze = x.ndim == 1
    xb = x.reshape(Q.layout.n, -1)
    u = xb[: ns * nt].reshape(nt, ns, -1)
    beta = xb[ns * nt :]
    out = np.zeros_like(xb)
    yu = out[: ns * nt].reshape(nt, ns, -1)
    for i in range(nt):
        yu[i] += _sym_from_lower(Q.D[i]) @ u[i]
        if i > 0:
            yu[i] += Q.E[i - 1] @ u[i - 1]
        if i + 1 < nt:
            yu[i] += Q.E[i].T @ u[i + 1]
        yu[i] += Q.F[i].T @ beta
        out[ns * nt :] += Q.F[i] @ u[i]
    out[ns * nt :] += _sym_from_lower(Q.T) @ beta
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# factorization


def bta_factorize(Q: BtaMatrix) -> BtaFactor:
    """Block Cholesky factorization L @ L.T = Q.

    Right-looking over the time blocks; Schur updates run on working
    copies of D/F/T so the input matrix is left untouched and can be
    re-factorized after assembly at a new hyperparameter value.  E
    blocks never receive updates in the BTA pattern.

    Raises NotPositiveDefinite (catchable) with the offending 0-based
    block index; the arrow tip reports index n_t.
    """
    ns, nt, nb = Q.layout.n_s, Q.layout.n_t, Q.layout.n_b
    Dw = Q.D.copy()
    Fw = Q.F.copy()
    Tw = Q.T.copy()
    L_D = np.empty_like(Dw)
    L_E = np.empty_like(Q.E)
    L_F = np.empty_like(Fw)
    for i in range(nt):
        L_D[i] = dense_chol(Dw[i], block_index=i)
        L_F[i] = dense_tri_solve(L_D[i], Fw[i], trans=True, side="right")
        block_multiply_accumulate(Tw, L_F[i], L_F[i], transpose_b=True, sign=-1.0)
        if i + 1 < nt:
            L_E[i] = dense_tri_solve(L_D[i], Q.E[i], trans=True, side="right")
            block_multiply_accumulate(Dw[i + 1], L_E[i], L_E[i], transpose_b=True, sign=-1.0)
            block_multiply_accumulate(Fw[i + 1], L_F[i], L_E[i], transpose_b=True, sign=-1.0)
    L_T = dense_chol(Tw, block_index=nt)
    return BtaFactor(Q.layout, L_D, L_E, L_F, L_T)


def bta_logdet(L: BtaFactor) -> float:
    """log det Q = 2 * sum(log diag(L)) read off the factor."""
    acc = float(np.log(np.diagonal(L.L_D, axis1=1, axis2=2)).sum())
    if L.layout.n_b:
        acc += float(np.log(np.diagonal(L.L_T)).sum())
    return 2.0 * acc


# ---------------------------------------------------------------------------
# solves


def _as_columns(layout, b):
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != layout.n:
        raise DimensionMismatch(f"rhs length {b.shape[0]} != n={layout.n}")
    return b.reshape(layout.n, -1), b.ndim == 1


def bta_forward_solve(L: BtaFactor, b) -> np.ndarray:
    """Solve L @ z = b by forward block substitution."""
    ns, nt = L.layout.n_s, L.layout.n_t
    bb, squeeze = _as_columns(L.layout, b)
    z = np.empty_like(bb)
    zu = z[: ns * nt].reshape(nt, ns, -1)
    bu = bb[: ns * nt].reshape(nt, ns, -1)
    tip = bb[ns * nt :].copy()
    for i in range(nt):
        rhs = bu[i] if i == 0 else bu[i] - L.L_E[i - 1] @ zu[i - 1]
        zu[i] = dense_tri_solve(L.L_D[i], rhs)
        tip -= L.L_F[i] @ zu[i]
    z[ns * nt :] = dense_tri_solve(L.L_T, tip)
    return z[:, 0] if squeeze else z


def bta_backward_solve(L: BtaFactor, z) -> np.ndarray:
    """Solve L.T @ x = z by backward block substitution.

    The arrow row enters each block solve exactly once.  Also the
    sampling primitive: x = L^-T z maps z ~ N(0, I) to N(0, Q^-1).
    """
    ns, nt = L.layout.n_s, L.layout.n_t
    zz, squeeze = _as_columns(L.layout, z)
    x = np.empty_like(zz)
    xu = x[: ns * nt].reshape(nt, ns, -1)
    zu = zz[: ns * nt].reshape(nt, ns, -1)
    x[ns * nt :] = dense_tri_solve(L.L_T, zz[ns * nt :], trans=True)
    xtip = x[ns * nt :]
    for i in range(nt - 1, -1, -1):
        rhs = zu[i] - L.L_F[i].T @ xtip
        if i + 1 < nt:
            rhs = rhs - L.L_E[i].T @ xu[i + 1]
        xu[i] = dense_tri_solve(L.L_D[i], rhs, trans=True)
    return x[:, 0] if squeeze else x


def bta_solve(L: BtaFactor, b) -> np.ndarray:
    """Solve Q @ x = b through the factor (forward then backward pass)."""
    return bta_backward_solve(L, bta_forward_solve(L, b))


# ---------------------------------------------------------------------------
# selected inversion


def bta_selected_inverse(L: BtaFactor) -> SelectedInverse:
    """Diagonal blocks, arrow row and tip of Q^-1 from the factor.

    Backward recursion over the time blocks, tip first:

        S_tip       = L_T^-T L_T^-1
        S_arrow[i]  = -(S_arrow[i+1] L_E[i] + S_tip L_F[i]) L_D[i]^-1
        S_diag[i]   = L_D[i]^-T (I + L_E[i]^T S_diag[i+1] L_E[i]
                                   + X + X^T
                                   + L_F[i]^T S_tip L_F[i]) L_D[i]^-1
        with X = L_F[i]^T S_arrow[i+1] L_E[i]

    (last block: terms containing L_E drop).  With n_b = 0 every arrow
    term vanishes identically and this is the pure block-tridiagonal
    recursion.
    """
    ns, nt, nb = L.layout.n_s, L.layout.n_t, L.layout.n_b
    S_diag = np.empty_like(L.L_D)
    S_arrow = np.empty_like(L.L_F)
    eye = np.eye(ns)

    tip_inv = dense_tri_solve(L.L_T, np.eye(nb))
    S_tip = dense_tri_solve(L.L_T, tip_inv, trans=True)

    i = nt - 1
    sf = block_multiply_accumulate(np.zeros((nb, ns)), S_tip, L.L_F[i])
    S_arrow[i] = dense_tri_solve(L.L_D[i], -sf, side="right")
    m = eye.copy()
    block_multiply_accumulate(m, L.L_F[i], sf, transpose_a=True)
    S_diag[i] = dense_tri_solve(
        L.L_D[i], dense_tri_solve(L.L_D[i], m, side="right"), trans=True
    )

    for i in range(nt - 2, -1, -1):
        se = block_multiply_accumulate(np.zeros((nb, ns)), S_arrow[i + 1], L.L_E[i])
        sf = block_multiply_accumulate(np.zeros((nb, ns)), S_tip, L.L_F[i])
        de = block_multiply_accumulate(np.zeros((ns, ns)), S_diag[i + 1], L.L_E[i])
        m = eye.copy()
        block_multiply_accumulate(m, L.L_E[i], de, transpose_a=True)
        cross = block_multiply_accumulate(np.zeros((ns, ns)), L.L_F[i], se, transpose_a=True)
        m += cross + cross.T
        block_multiply_accumulate(m, L.L_F[i], sf, transpose_a=True)
        S_arrow[i] = dense_tri_solve(L.L_D[i], -(se + sf), side="right")
        S_diag[i] = dense_tri_solve(
            L.L_D[i], dense_tri_solve(L.L_D[i], m, side="right"), trans=True
        )
    return SelectedInverse(L.layout, S_diag, S_arrow, S_tip)


def selected_inverse_diagonal(S: SelectedInverse) -> np.ndarray:
    """Diagonal of Q^-1 as a flat length-n vector."""
    ns, nt = S.layout.n_s, S.layout.n_t
    d = np.empty(S.layout.n)
    d[: ns * nt] = np.diagonal(S.S_diag, axis1=1, axis2=2).reshape(-1)
    if S.layout.n_b:
        d[ns * nt :] = np.diagonal(S.S_tip)
    return d
