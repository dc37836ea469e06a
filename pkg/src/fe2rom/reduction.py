"""POD bases, incremental SVD updating, Galerkin-projected solves, and the
relative residual indicator that gates acceptance of reduced solutions."""

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from . import fe_core
from .errors import (DivergenceError, EmptyBasisError, LinearSolveError,
                     MeshError, SingularDeformationError)

# singular values below DISCARD_FACTOR * sigma_1 are treated as numerical zero
DISCARD_FACTOR = 1.0e-12
DEFAULT_ENERGY_TOL = 1.0e-10


@dataclass(frozen=True)
class Rob:
    """Reduced-order basis: orthonormal columns plus their singular values."""

    V: np.ndarray
    singular_values: np.ndarray

    @property
    def s(self):
        return self.V.shape[1]


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD U diag(s) W^T tracking a snapshot matrix column by column."""

    U: np.ndarray
    sing: np.ndarray
    W: np.ndarray

    @property
    def rank(self):
        return self.sing.shape[0]

    @property
    def n_columns(self):
        return self.W.shape[0]

    def matrix(self):
        """Reconstruct the tracked snapshot matrix."""
        return self.U @ (self.sing[:, None] * self.W.T)


def svd_empty(n_rows):
    return SvdFactorization(U=np.zeros((n_rows, 0)), sing=np.zeros(0),
                            W=np.zeros((0, 0)))


def svd_from_matrix(A):
    """Batch thin SVD with numerical-zero singular values discarded."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError("snapshot matrix must be 2-D")
    if A.shape[1] == 0:
        return svd_empty(A.shape[0])
    U, s, Wt = np.linalg.svd(A, full_matrices=False)
    if s.size and s[0] > 0.0:
        keep = s > DISCARD_FACTOR * s[0]
    else:
        keep = np.zeros(s.size, dtype=bool)
    return SvdFactorization(U=np.ascontiguousarray(U[:, keep]),
                            sing=s[keep].copy(),
                            W=np.ascontiguousarray(Wt[keep].T))


def svd_append_column(fact, new_snapshot):
    """Rank-one update of the factorization with one appended column.

    Cost is independent of how many columns were absorbed before, beyond
    O(n r + r^3) for the projection and the small core SVD. The residual
    direction is re-orthogonalized once before it can enter the basis, and
    directions with singular value below DISCARD_FACTOR * sigma_1 are
    dropped.
    """
    c = np.asarray(new_snapshot, dtype=float).ravel()
    n = fact.U.shape[0]
    if c.shape[0] != n:
        raise ValueError(f"snapshot length {c.shape[0]} != {n}")
    r, m = fact.rank, fact.n_columns
    if r == 0:
        norm = np.linalg.norm(c)
        if norm == 0.0:
            return SvdFactorization(U=np.zeros((n, 0)), sing=np.zeros(0),
                                    W=np.zeros((m + 1, 0)))
        return SvdFactorization(U=(c / norm)[:, None], sing=np.array([norm]),
                                W=np.vstack([np.zeros((m, 1)), [[1.0]]]))
    p = fact.U.T @ c
    resid = c - fact.U @ p
    # one re-orthogonalization pass keeps the basis orthonormal over long
    # append sequences
    corr = fact.U.T @ resid
    p = p + corr
    resid = resid - fact.U @ corr
    rho = np.linalg.norm(resid)
    scale = fact.sing[0]
    W_grown = np.vstack([fact.W, np.zeros((1, r))])
    if rho > DISCARD_FACTOR * max(scale, np.linalg.norm(c)):
        core = np.zeros((r + 1, r + 1))
        core[:r, :r] = np.diag(fact.sing)
        core[:r, r] = p
        core[r, r] = rho
        Uc, sc, Wct = np.linalg.svd(core)
        U_new = np.hstack([fact.U, (resid / rho)[:, None]]) @ Uc
        W_new = np.hstack([W_grown, np.concatenate([np.zeros(m), [1.0]])[:, None]]) \
            @ Wct.T
    else:
        core = np.hstack([np.diag(fact.sing), p[:, None]])
        Uc, sc, Wct = np.linalg.svd(core, full_matrices=False)
        U_new = fact.U @ Uc
        W_new = np.hstack([W_grown, np.concatenate([np.zeros(m), [1.0]])[:, None]]) \
            @ Wct.T
    keep = sc > DISCARD_FACTOR * sc[0] if sc.size and sc[0] > 0 \
        else np.zeros(sc.size, dtype=bool)
    return SvdFactorization(U=np.ascontiguousarray(U_new[:, keep]),
                            sing=sc[keep].copy(),
                            W=np.ascontiguousarray(W_new[:, keep]))


def pod_truncate(fact, energy_tol=DEFAULT_ENERGY_TOL, s_max=None):
    """Energy-truncated basis from a factorization.

    Keeps the smallest s with sum_{i<=s} sigma_i^2 >= (1 - energy_tol) of
    the total, capped at s_max.
    """
    if fact.rank == 0:
        raise EmptyBasisError("cannot truncate a rank-0 factorization")
    if not 0.0 <= energy_tol < 1.0:
        raise ValueError("energy_tol must be in [0, 1)")
    if energy_tol == 0.0:
        s = fact.rank
    else:
        energies = fact.sing ** 2
        cum = np.cumsum(energies)
        target = (1.0 - energy_tol) * cum[-1]
        s = int(np.searchsorted(cum, target - 1e-15 * cum[-1]) + 1)
        s = min(s, fact.rank)
    if s_max is not None:
        s = min(s, int(s_max))
    if s < 1:
        raise EmptyBasisError("truncation produced an empty basis")
    return Rob(V=np.ascontiguousarray(fact.U[:, :s]),
               singular_values=fact.sing[:s].copy())


def solve_micro_prom(bvp, rob, y_guess=None):
    """Galerkin-projected Newton solve of a micro problem.

    Same tolerance policy as the full solver, applied to the reduced
    residual ||V^T f||. Returns (y, converged); a non-converged flag is the
    caller's signal to fall back to the full model.
    """
    mesh = bvp.mesh
    pack = mesh.pack(bvp.materials)
    V = rob.V
    if y_guess is None:
        y_guess = np.zeros(rob.s)
    y_guess = np.ascontiguousarray(y_guess, dtype=np.float64)
    if np.array_equal(bvp.F, np.eye(3)) and not y_guess.any():
        return np.zeros(rob.s), True
    y, it, st, den, num, r_red, P, f_c, nf, nt = _k.reduced_solve_full(
        bvp.F, V, y_guess, *pack.args(), fe_core.TOL_REL, fe_core.TOL_ABS_FAC,
        pack.res_floor, fe_core.MAX_ITER)
    if st == _k.OK:
        return y, True
    if st == _k.BADSOLVE:
        raise LinearSolveError("singular reduced tangent")
    return y, False


def solve_micro_prom_counted(bvp, rob, y_guess=None):
    """solve_micro_prom plus (force passes, tangent passes, iterations)."""
    mesh = bvp.mesh
    pack = mesh.pack(bvp.materials)
    if y_guess is None:
        y_guess = np.zeros(rob.s)
    y_guess = np.ascontiguousarray(y_guess, dtype=np.float64)
    if np.array_equal(bvp.F, np.eye(3)) and not y_guess.any():
        return np.zeros(rob.s), True, 0, 0, 0
    y, it, st, den, num, r_red, P, f_c, nf, nt = _k.reduced_solve_full(
        bvp.F, rob.V, y_guess, *pack.args(), fe_core.TOL_REL,
        fe_core.TOL_ABS_FAC, pack.res_floor, fe_core.MAX_ITER)
    if st == _k.BADSOLVE:
        raise LinearSolveError("singular reduced tangent")
    return y, st == _k.OK, int(nf), int(nt), int(it)


def residual_indicator(bvp, u_approx):
    """Relative equilibrium residual of an approximate micro solution.

    r = ||f(u, u_ring)|| / ||f(0, u_ring)||, both evaluated on the full
    mesh. A zero denominator only occurs for the stress-free reference
    problem; by convention r = 0 there when the numerator also vanishes.
    """
    mesh = bvp.mesh
    pack = mesh.pack(bvp.materials)
    u = np.ascontiguousarray(u_approx, dtype=np.float64)
    st0, den, _, _ = _k.residual_and_stress(np.zeros(mesh.n_u), bvp.F,
                                            *pack.force_args())
    st1, num, _, _ = _k.residual_and_stress(u, bvp.F, *pack.force_args())
    if st0 != _k.OK or st1 != _k.OK:
        raise SingularDeformationError("inverted configuration in residual evaluation")
    if den == 0.0:
        if num <= 1.0e-14:
            return 0.0
        raise MeshError("zero boundary data with nonzero residual")
    return float(num / den)
