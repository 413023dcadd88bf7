"""Factorization, solves, log-determinant and selected inversion against
dense references."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btainla.bta import (
    BtaFactor,
    BtaLayout,
    BtaMatrix,
    DimensionMismatch,
    NotPositiveDefinite,
    bta_backward_solve,
    bta_factor_to_dense,
    bta_factorize,
    bta_forward_solve,
    bta_logdet,
    bta_matvec,
    bta_selected_inverse,
    bta_solve,
    bta_to_dense,
    block_multiply_accumulate,
    dense_chol,
    dense_tri_solve,
    selected_inverse_diagonal,
)
from btainla.oracles import (
    dense_logdet,
    dense_selected_blocks,
    naive_matmul,
    random_spd_bta,
)


def identity_bta(n_s=2, n_t=3, n_b=1):
    lay = BtaLayout(n_s, n_t, n_b)
    return BtaMatrix(
        lay,
        np.broadcast_to(np.eye(n_s), (n_t, n_s, n_s)).copy(),
        np.zeros((n_t - 1, n_s, n_s)),
        np.zeros((n_t, n_b, n_s)),
        np.eye(n_b),
    )


layouts = st.tuples(
    st.integers(1, 6), st.integers(1, 5), st.integers(0, 3), st.integers(0, 2**32 - 1)
)


# ---------------------------------------------------------------------------
# dense kernels


class TestDenseKernels:
    def test_chol_identity(self):
        np.testing.assert_array_equal(dense_chol(np.eye(4)), np.eye(4))

    def test_chol_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            dense_chol(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_tri_solve_scaled_identity(self):
        b = np.arange(12.0).reshape(4, 3)
        np.testing.assert_allclose(dense_tri_solve(2.0 * np.eye(4), b), 0.5 * b)

    def test_tri_solve_right_transpose(self):
        rng = np.random.default_rng(7)
        lo = np.tril(rng.standard_normal((5, 5))) + 5.0 * np.eye(5)
        b = rng.standard_normal((3, 5))
        x = dense_tri_solve(lo, b, trans=True, side="right")
        np.testing.assert_allclose(x @ lo.T, b, atol=1e-12)

    def test_gemm_matches_naive_triple_loop(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        c = rng.standard_normal((8, 8))
        got = block_multiply_accumulate(c.copy(), a, b, sign=-1.0)
        want = c - naive_matmul(a, b)
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_gemm_transpose_flags(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((3, 4))
        c = np.zeros((5, 4))
        block_multiply_accumulate(c, a, b, transpose_a=True)
        np.testing.assert_allclose(c, naive_matmul(a.T.copy(), b), atol=1e-14)


# ---------------------------------------------------------------------------
# factorization


class TestFactorize:
    def test_identity(self):
        L = bta_factorize(identity_bta())
        np.testing.assert_array_equal(bta_factor_to_dense(L), np.eye(7))

    def test_scaled_identity(self):
        Q = identity_bta()
        Q.D *= 4.0
        Q.T *= 4.0
        L = bta_factorize(Q)
        np.testing.assert_allclose(bta_factor_to_dense(L), 2.0 * np.eye(7))

    def test_worked_scalar_blocks(self):
        # full matrix [[2,-1,0],[-1,2,0.5],[0,0.5,3]] as n_s=1, n_t=2, n_b=1
        lay = BtaLayout(1, 2, 1)
        Q = BtaMatrix(
            lay,
            np.array([[[2.0]], [[2.0]]]),
            np.array([[[-1.0]]]),
            np.array([[[0.0]], [[0.5]]]),
            np.array([[3.0]]),
        )
        L = bta_factorize(Q)
        assert L.L_D[0][0, 0] == pytest.approx(np.sqrt(2.0), rel=1e-15)
        assert L.L_E[0][0, 0] == pytest.approx(-1.0 / np.sqrt(2.0), rel=1e-15)
        assert L.L_F[1][0, 0] == pytest.approx(0.5 / np.sqrt(1.5), rel=1e-15)
        assert L.L_T[0, 0] == pytest.approx(np.sqrt(17.0 / 6.0), rel=1e-15)
        dense_L = np.linalg.cholesky(bta_to_dense(Q))
        np.testing.assert_allclose(bta_factor_to_dense(L), dense_L, atol=1e-14)
        assert bta_logdet(L) == pytest.approx(np.log(8.5), rel=1e-14)

    def test_input_not_modified(self):
        rng = np.random.default_rng(3)
        Q = random_spd_bta(BtaLayout(3, 4, 2), rng)
        before = [Q.D.copy(), Q.E.copy(), Q.F.copy(), Q.T.copy()]
        bta_factorize(Q)
        for a, b in zip(before, (Q.D, Q.E, Q.F, Q.T)):
            np.testing.assert_array_equal(a, b)

    def test_reports_failing_block_index(self):
        Q = identity_bta(n_s=2, n_t=3, n_b=1)
        Q.D[1] = -np.eye(2)
        with pytest.raises(NotPositiveDefinite) as exc:
            bta_factorize(Q)
        assert exc.value.block_index == 1

    def test_reports_tip_block_index(self):
        Q = identity_bta(n_s=2, n_t=3, n_b=1)
        Q.T[0, 0] = -5.0
        with pytest.raises(NotPositiveDefinite) as exc:
            bta_factorize(Q)
        assert exc.value.block_index == 3

    @settings(max_examples=40)
    @given(layouts)
    def test_reconstruction(self, dims):
        ns, nt, nb, seed = dims
        rng = np.random.default_rng(seed)
        Q = random_spd_bta(BtaLayout(ns, nt, nb), rng)
        L = bta_factorize(Q)
        dense_L = bta_factor_to_dense(L)
        dense_Q = bta_to_dense(Q)
        err = np.linalg.norm(dense_L @ dense_L.T - dense_Q) / np.linalg.norm(dense_Q)
        assert err <= 1e-12
        # diagonal of the factor strictly positive
        assert (np.diagonal(L.L_D, axis1=1, axis2=2) > 0).all()
        if nb:
            assert (np.diagonal(L.L_T) > 0).all()

    @given(layouts)
    def test_logdet_matches_dense(self, dims):
        ns, nt, nb, seed = dims
        rng = np.random.default_rng(seed)
        Q = random_spd_bta(BtaLayout(ns, nt, nb), rng)
        want = dense_logdet(bta_to_dense(Q))
        got = bta_logdet(bta_factorize(Q))
        # denominator floored at 1: logdet can legitimately be ~0
        assert abs(got - want) / max(abs(want), 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# solves


class TestSolve:
    def test_identity_solve(self):
        Q = identity_bta()
        rng = np.random.default_rng(0)
        b = rng.standard_normal(Q.layout.n)
        np.testing.assert_array_equal(bta_solve(bta_factorize(Q), b), b)

    def test_diagonal_solve(self):
        Q = identity_bta()
        Q.D *= 4.0
        Q.T *= 4.0
        b = np.ones(Q.layout.n)
        np.testing.assert_allclose(bta_solve(bta_factorize(Q), b), 0.25 * b)

    def test_matches_dense_solve(self):
        # mild conditioning: forward error vs the dense solve scales with cond
        rng = np.random.default_rng(42)
        Q = random_spd_bta(BtaLayout(5, 4, 2), rng, condition=1e3)
        b = rng.standard_normal(Q.layout.n)
        x = bta_solve(bta_factorize(Q), b)
        want = np.linalg.solve(bta_to_dense(Q), b)
        assert np.linalg.norm(x - want) / np.linalg.norm(want) <= 1e-12

    @given(layouts)
    def test_residual(self, dims):
        ns, nt, nb, seed = dims
        rng = np.random.default_rng(seed)
        Q = random_spd_bta(BtaLayout(ns, nt, nb), rng)
        b = rng.standard_normal(Q.layout.n)
        x = bta_solve(bta_factorize(Q), b)
        r = np.linalg.norm(bta_matvec(Q, x) - b) / np.linalg.norm(b)
        assert r <= 1e-10

    def test_forward_backward_split(self):
        rng = np.random.default_rng(8)
        Q = random_spd_bta(BtaLayout(4, 3, 2), rng)
        L = bta_factorize(Q)
        dense_L = bta_factor_to_dense(L)
        b = rng.standard_normal(Q.layout.n)
        z = bta_forward_solve(L, b)
        np.testing.assert_allclose(dense_L @ z, b, atol=1e-10)
        x = bta_backward_solve(L, z)
        np.testing.assert_allclose(dense_L.T @ x, z, atol=1e-10)

    def test_matrix_rhs(self):
        rng = np.random.default_rng(9)
        Q = random_spd_bta(BtaLayout(3, 3, 1), rng)
        B = rng.standard_normal((Q.layout.n, 5))
        X = bta_solve(bta_factorize(Q), B)
        np.testing.assert_allclose(bta_to_dense(Q) @ X, B, atol=1e-9)

    def test_rhs_length_checked(self):
        Q = identity_bta()
        with pytest.raises(DimensionMismatch):
            bta_solve(bta_factorize(Q), np.ones(Q.layout.n + 1))

    def test_matvec_matches_dense(self):
        rng = np.random.default_rng(10)
        Q = random_spd_bta(BtaLayout(4, 4, 3), rng)
        x = rng.standard_normal(Q.layout.n)
        np.testing.assert_allclose(bta_matvec(Q, x), bta_to_dense(Q) @ x, atol=1e-11)


# ---------------------------------------------------------------------------
# selected inversion


class TestSelectedInverse:
    def test_identity(self):
        S = bta_selected_inverse(bta_factorize(identity_bta()))
        for blk in S.S_diag:
            np.testing.assert_array_equal(blk, np.eye(2))
        np.testing.assert_array_equal(S.S_tip, np.eye(1))
        np.testing.assert_array_equal(S.S_arrow, np.zeros((3, 1, 2)))

    def test_diagonal_matrix(self):
        lay = BtaLayout(2, 2, 1)
        d = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        Q = BtaMatrix(
            lay,
            np.stack([np.diag(d[0:2]), np.diag(d[2:4])]),
            np.zeros((1, 2, 2)),
            np.zeros((2, 1, 2)),
            np.array([[5.0]]),
        )
        S = bta_selected_inverse(bta_factorize(Q))
        np.testing.assert_allclose(selected_inverse_diagonal(S), 1.0 / d)

    @settings(max_examples=40)
    @given(layouts)
    def test_matches_dense_inverse_blocks(self, dims):
        ns, nt, nb, seed = dims
        rng = np.random.default_rng(seed)
        Q = random_spd_bta(BtaLayout(ns, nt, nb), rng)
        S = bta_selected_inverse(bta_factorize(Q))
        inv = np.linalg.inv(bta_to_dense(Q))
        want_diag, want_arrow, want_tip = dense_selected_blocks(inv, Q.layout)
        scale = np.linalg.norm(inv)
        assert np.linalg.norm(S.S_diag - want_diag) / scale <= 1e-10
        assert np.linalg.norm(S.S_arrow - want_arrow) / max(scale, 1e-300) <= 1e-10
        assert np.linalg.norm(S.S_tip - want_tip) / max(scale, 1e-300) <= 1e-10

    @given(layouts)
    def test_diag_positive_and_symmetric(self, dims):
        ns, nt, nb, seed = dims
        rng = np.random.default_rng(seed)
        Q = random_spd_bta(BtaLayout(ns, nt, nb), rng)
        S = bta_selected_inverse(bta_factorize(Q))
        assert (selected_inverse_diagonal(S) > 0).all()
        np.testing.assert_allclose(S.S_diag, S.S_diag.transpose(0, 2, 1), atol=1e-10)
        np.testing.assert_allclose(S.S_tip, S.S_tip.T, atol=1e-10)

    def test_no_interior_offdiagonal_storage(self):
        # the contract: only diagonal blocks, arrow row and tip exist
        S = bta_selected_inverse(bta_factorize(identity_bta()))
        fields = {f for f in vars(S)}
        assert fields == {"layout", "S_diag", "S_arrow", "S_tip"}


# ---------------------------------------------------------------------------
# pure block-tridiagonal degeneration (n_b = 0)


class TestArrowFreeCase:
    def test_factor_solve_selinv(self):
        rng = np.random.default_rng(21)
        Q = random_spd_bta(BtaLayout(4, 5, 0), rng)
        L = bta_factorize(Q)
        assert L.L_T.shape == (0, 0)
        assert L.L_F.shape == (5, 0, 4)
        dense_Q = bta_to_dense(Q)
        dense_L = bta_factor_to_dense(L)
        np.testing.assert_allclose(dense_L @ dense_L.T, dense_Q, atol=1e-10)
        b = rng.standard_normal(Q.layout.n)
        np.testing.assert_allclose(
            bta_solve(L, b), np.linalg.solve(dense_Q, b), atol=1e-9
        )
        S = bta_selected_inverse(L)
        inv = np.linalg.inv(dense_Q)
        want_diag, _, _ = dense_selected_blocks(inv, Q.layout)
        np.testing.assert_allclose(S.S_diag, want_diag, atol=1e-10)

    def test_single_time_block(self):
        rng = np.random.default_rng(22)
        Q = random_spd_bta(BtaLayout(5, 1, 0), rng)
        L = bta_factorize(Q)
        inv = np.linalg.inv(bta_to_dense(Q))
        S = bta_selected_inverse(L)
        np.testing.assert_allclose(S.S_diag[0], inv, atol=1e-10)


class TestValidation:
    def test_block_shape_mismatch(self):
        lay = BtaLayout(2, 2, 1)
        with pytest.raises(DimensionMismatch):
            BtaMatrix(lay, np.zeros((2, 3, 3)), np.zeros((1, 2, 2)),
                      np.zeros((2, 1, 2)), np.eye(1))

    def test_nonfinite_rejected(self):
        lay = BtaLayout(1, 1, 0)
        with pytest.raises(ValueError):
            BtaMatrix(lay, np.array([[[np.nan]]]), np.zeros((0, 1, 1)),
                      np.zeros((1, 0, 1)), np.zeros((0, 0)))

    def test_layout_rejects_nonpositive(self):
        with pytest.raises(DimensionMismatch):
            BtaLayout(0, 3, 1)

    def test_factor_roundtrip_type(self):
        L = bta_factorize(identity_bta())
        assert isinstance(L, BtaFactor)
        assert L.layout.n == 7
