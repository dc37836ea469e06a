"""Basis construction and projected-solve tests: energy truncation,
incremental SVD against the batch oracle, Galerkin solves, and the
residual indicator."""

import numpy as np
import pytest

import fe2rom
from fe2rom import meshgen, reduction
from fe2rom.errors import EmptyBasisError

MAT = fe2rom.Material(E=207e9, nu=0.3)


def synthetic_factorization(sing):
    """Factorization with prescribed singular values and random subspaces."""
    rng = np.random.default_rng(0)
    r = len(sing)
    U, _ = np.linalg.qr(rng.standard_normal((40, r)))
    W, _ = np.linalg.qr(rng.standard_normal((12, r)))
    return reduction.SvdFactorization(U=U, sing=np.asarray(sing, dtype=float),
                                      W=W)


def principal_angles(A, B):
    """Sine-based principal angles (accurate near zero)."""
    sines = np.linalg.svd(B - A @ (A.T @ B), compute_uv=False)
    return np.arcsin(np.clip(sines, 0.0, 1.0))


class TestPodTruncate:
    def test_single_column(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal(30)
        fact = reduction.svd_from_matrix(c[:, None])
        rob = reduction.pod_truncate(fact, 1e-6)
        assert rob.s == 1
        np.testing.assert_allclose(np.abs(rob.V[:, 0]),
                                   np.abs(c) / np.linalg.norm(c), rtol=1e-12)

    def test_energy_sum_example(self):
        fact = synthetic_factorization([10.0, 1.0, 1e-9])
        rob = reduction.pod_truncate(fact, 1e-6)
        assert rob.s == 2

    def test_zero_tolerance_keeps_numerical_rank(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((50, 7)) @ rng.standard_normal((7, 20))
        fact = reduction.svd_from_matrix(A)
        rob = reduction.pod_truncate(fact, 0.0, s_max=None)
        assert rob.s == fact.rank == 7

    def test_s_max_cap(self):
        fact = synthetic_factorization([5.0, 4.0, 3.0, 2.0])
        rob = reduction.pod_truncate(fact, 0.0, s_max=2)
        assert rob.s == 2

    def test_rank_zero_rejected(self):
        with pytest.raises(EmptyBasisError):
            reduction.pod_truncate(reduction.svd_empty(10), 1e-6)

    def test_projection_optimality(self):
        """Sum of squared out-of-basis residuals over the training set is
        bounded by the discarded energy."""
        rng = np.random.default_rng(3)
        A = rng.standard_normal((60, 25)) * np.logspace(0, -6, 25)[None, :]
        fact = reduction.svd_from_matrix(A)
        tol = 1e-4
        rob = reduction.pod_truncate(fact, tol)
        resid = A - rob.V @ (rob.V.T @ A)
        total = (fact.sing ** 2).sum()
        assert (resid ** 2).sum() <= tol * total * (1 + 1e-9)


class TestSvdAppendColumn:
    def test_first_column(self):
        rng = np.random.default_rng(4)
        c = rng.standard_normal(25)
        fact = reduction.svd_append_column(reduction.svd_empty(25), c)
        assert fact.rank == 1
        assert fact.sing[0] == pytest.approx(np.linalg.norm(c), rel=1e-13)

    def test_zero_column_keeps_rank(self):
        rng = np.random.default_rng(5)
        fact = reduction.svd_from_matrix(rng.standard_normal((20, 3)))
        out = reduction.svd_append_column(fact, np.zeros(20))
        assert out.rank == 3
        assert out.n_columns == 4

    def test_sequential_appends_match_batch(self):
        rng = np.random.default_rng(6)
        cols = rng.standard_normal((120, 50))
        fact = reduction.svd_empty(120)
        for j in range(50):
            fact = reduction.svd_append_column(fact, cols[:, j])
        sv_batch = np.linalg.svd(cols, compute_uv=False)
        np.testing.assert_allclose(fact.sing, sv_batch, rtol=1e-8)
        U_batch = np.linalg.svd(cols, full_matrices=False)[0]
        assert principal_angles(fact.U, U_batch).max() <= 1e-8

    def test_in_span_append_does_not_grow_rank(self):
        rng = np.random.default_rng(7)
        A = rng.standard_normal((30, 4))
        fact = reduction.svd_from_matrix(A)
        combo = A @ rng.standard_normal(4)
        out = reduction.svd_append_column(fact, combo)
        assert out.rank == 4

    def test_reconstruction_invariant(self):
        rng = np.random.default_rng(8)
        cols = rng.standard_normal((40, 30))
        fact = reduction.svd_empty(40)
        for j in range(30):
            fact = reduction.svd_append_column(fact, cols[:, j])
        np.testing.assert_allclose(fact.matrix(), cols,
                                   atol=1e-8 * np.linalg.norm(cols))


class TestSolveMicroProm:
    @pytest.fixture(scope="class")
    def cell(self):
        mesh, mats = meshgen.generate_rve_void(3, 0, MAT)
        return mesh, mats

    def test_identity_state(self, cell):
        mesh, mats = cell
        rng = np.random.default_rng(9)
        V, _ = np.linalg.qr(rng.standard_normal((mesh.n_u, 4)))
        rob = reduction.Rob(V=V, singular_values=np.ones(4))
        bvp = fe2rom.MicroBvp(mesh=mesh, materials=mats, F=np.eye(3))
        y, converged = fe2rom.solve_micro_prom(bvp, rob)
        assert converged
        np.testing.assert_array_equal(y, 0.0)

    def test_single_snapshot_basis_reproduces_solution(self, cell):
        mesh, mats = cell
        F = np.diag([1.04, 1.0, 0.98])
        bvp = fe2rom.MicroBvp(mesh=mesh, materials=mats, F=F)
        sol = fe2rom.solve_micro_hdm(bvp)
        fact = reduction.svd_from_matrix(sol.u[:, None])
        rob = reduction.pod_truncate(fact, 0.0)
        y, converged = fe2rom.solve_micro_prom(bvp, rob)
        assert converged
        r = fe2rom.residual_indicator(bvp, rob.V @ y)
        assert r <= 1e-7

    def test_full_square_basis_matches_hdm(self, cell):
        mesh, mats = cell
        rng = np.random.default_rng(10)
        Q, _ = np.linalg.qr(rng.standard_normal((mesh.n_u, mesh.n_u)))
        rob = reduction.Rob(V=Q, singular_values=np.ones(mesh.n_u))
        F = np.diag([1.03, 0.99, 1.0])
        bvp = fe2rom.MicroBvp(mesh=mesh, materials=mats, F=F)
        sol = fe2rom.solve_micro_hdm(bvp)
        y, converged = fe2rom.solve_micro_prom(bvp, rob)
        assert converged
        np.testing.assert_allclose(Q @ y, sol.u,
                                   atol=1e-9 * max(np.abs(sol.u).max(), 1e-12))


class TestResidualIndicator:
    @pytest.fixture(scope="class")
    def problem(self):
        mesh, mats = meshgen.generate_rve_void(5, 3, MAT)
        bvp = fe2rom.MicroBvp(mesh=mesh, materials=mats,
                              F=np.diag([1.02, 0.995, 1.0]))
        sol = fe2rom.solve_micro_hdm(bvp)
        return bvp, sol

    def test_converged_solution(self, problem):
        bvp, sol = problem
        assert fe2rom.residual_indicator(bvp, sol.u) <= 1e-8

    def test_zero_field_gives_one(self, problem):
        bvp, _ = problem
        r = fe2rom.residual_indicator(bvp, np.zeros(bvp.mesh.n_u))
        assert r == pytest.approx(1.0, rel=1e-12)

    def test_identity_convention(self):
        mesh, mats = meshgen.generate_rve_void(3, 1, MAT)
        bvp = fe2rom.MicroBvp(mesh=mesh, materials=mats, F=np.eye(3))
        assert fe2rom.residual_indicator(bvp, np.zeros(mesh.n_u)) == 0.0


class TestMonotoneEnrichment:
    def test_failed_query_accepted_after_append(self):
        """Appending the full solution of a rejected query and keeping every
        direction makes the same query pass on re-solve."""
        mesh, mats = meshgen.generate_rve_void(3, 1, MAT)
        rng = np.random.default_rng(12)
        F_train = [np.eye(3) + 3e-3 * rng.standard_normal((3, 3))
                   for _ in range(4)]
        U = [fe2rom.solve_micro_hdm(
            fe2rom.MicroBvp(mesh=mesh, materials=mats, F=F)).u
            for F in F_train]
        fact = reduction.svd_from_matrix(np.array(U).T)
        rob = reduction.pod_truncate(fact, 0.0)

        F_query = np.diag([1.10, 1.0, 0.97])
        bvp = fe2rom.MicroBvp(mesh=mesh, materials=mats, F=F_query)
        y, converged = fe2rom.solve_micro_prom(bvp, rob)
        r_before = fe2rom.residual_indicator(bvp, rob.V @ y) if converged \
            else np.inf
        assert r_before > 1e-3

        sol = fe2rom.solve_micro_hdm(bvp)
        fact = reduction.svd_append_column(fact, sol.u)
        rob2 = reduction.pod_truncate(fact, 0.0)
        y2, converged2 = fe2rom.solve_micro_prom(bvp, rob2,
                                                 y_guess=rob2.V.T @ sol.u)
        assert converged2
        assert fe2rom.residual_indicator(bvp, rob2.V @ y2) <= 1e-7
