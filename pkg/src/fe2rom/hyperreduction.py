"""ECSW hyperreduction: training system assembly, sparse nonnegative least
squares in the Lawson-Hanson form, and weighted reduced-force evaluation that
never touches unsampled elements."""

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from . import fe_core
from .errors import LinearSolveError, MeshError, SingularDeformationError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1.0e-3


@dataclass(frozen=True)
class ReducedMesh:
    """Sampled element ids (sorted) with strictly positive weights."""

    element_ids: np.ndarray
    weights: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "element_ids",
                           np.ascontiguousarray(self.element_ids, dtype=np.int64))
        object.__setattr__(self, "weights",
                           np.ascontiguousarray(self.weights, dtype=np.float64))
        if self.element_ids.shape != self.weights.shape:
            raise MeshError("element ids and weights must align")
        if np.unique(self.element_ids).size != self.element_ids.size:
            raise MeshError("duplicate sampled element")
        if (self.weights <= 0.0).any():
            raise MeshError("weights must be strictly positive")

    @property
    def n_sampled(self):
        return self.element_ids.shape[0]

    @staticmethod
    def full(mesh):
        """Degenerate reduced mesh: every element, unit weights."""
        ne = mesh.n_elements
        return ReducedMesh(element_ids=np.arange(ne, dtype=np.int64),
                           weights=np.ones(ne))


@dataclass(frozen=True)
class EcswTraining:
    """Training system G alpha ~ b with b the exact row sums of G."""

    G: np.ndarray
    b: np.ndarray
    epsilon: float


def basis_element_slices(mesh, rob, element_ids=None):
    """Per-element basis slices (m, 24, s), zero rows on constrained dofs."""
    geom = mesh.geometry()
    if element_ids is None:
        element_ids = np.arange(mesh.n_elements, dtype=np.int64)
    V = rob.V
    out = np.zeros((element_ids.shape[0], 24, rob.s))
    for j, e in enumerate(element_ids):
        for p in range(24):
            fd = geom["elem_dofs"][e, p]
            if mesh.dof_kind[fd] == 0:
                out[j, p, :] = V[mesh.dof_pos[fd], :]
    return out


def build_ecsw_training(mesh, materials, rob, training_states, epsilon=DEFAULT_EPSILON):
    """Assemble the element-contribution matrix for ECSW training.

    training_states is a sequence of (y, u_ring) pairs; block i of column e
    holds (V^e)^T f^e at the state reconstructed from y_i with boundary data
    u_ring_i. b is the exact rowwise sum, so the all-ones weight vector
    reproduces it by construction.
    """
    if len(training_states) < 1:
        raise ValueError("at least one training state required")
    pack = mesh.pack(materials)
    s = rob.s
    nt = len(training_states)
    Y = np.empty((nt, s))
    Ubar_c = np.zeros((nt, 3 * mesh.n_nodes))
    for i, (y, u_ring) in enumerate(training_states):
        Y[i] = y
        Ubar_c[i, mesh.c_dofs] = np.asarray(u_ring)[mesh.dof_pos[mesh.c_dofs]]
    V_el_all = basis_element_slices(mesh, rob)
    G, st, e, t = _k.ecsw_columns(Y, Ubar_c, V_el_all, pack.grad, pack.wdet,
                                  pack.elem_dofs, pack.mu_e, pack.lam_e)
    if st != _k.OK:
        raise SingularDeformationError(
            f"element {e} inverted at training state {t}", element=int(e))
    return EcswTraining(G=G, b=G.sum(axis=1), epsilon=float(epsilon))


def nnls_lawson_hanson(G, b, epsilon):
    """Sparse nonnegative least squares, active-set method with early exit.

    Iterates the classic passive-set expansion but tests the stopping
    criterion ||G a - b|| <= epsilon ||b|| in the outer loop, which is what
    turns the solver into a sparsifier. Inner least squares by QR via
    lstsq on the passive columns.

    Returns (alpha, converged). A False flag means the target could not be
    met even with every usable column active.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    m, n = G.shape
    alpha = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return alpha, True
    target = epsilon * bnorm
    resid = b.copy()
    grad_tol = 10.0 * np.finfo(float).eps * max(m, n) * max(np.abs(G).max(), 1.0)
    max_outer = 3 * n
    for _ in range(max_outer):
        if np.linalg.norm(resid) <= target:
            return alpha, True
        w = G.T @ resid
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= grad_tol:
            return alpha, False
        passive[j] = True
        # inner loop restores feasibility of the passive-set least squares
        while True:
            idx = np.flatnonzero(passive)
            z = np.linalg.lstsq(G[:, idx], b, rcond=None)[0]
            if (z > 0.0).all():
                alpha[:] = 0.0
                alpha[idx] = z
                break
            cur = alpha[idx]
            neg = z <= 0.0
            steps = cur[neg] / (cur[neg] - z[neg])
            t_step = steps.min() if steps.size else 0.0
            alpha[idx] = cur + t_step * (z - cur)
            drop = idx[alpha[idx] <= 10.0 * np.finfo(float).eps * abs(alpha).max()]
            alpha[drop] = 0.0
            passive[drop] = False
            if not passive.any():
                break
        resid = b - G @ alpha
    return alpha, np.linalg.norm(resid) <= target


def train_reduced_mesh(mesh, materials, rob, training_states,
                       epsilon=DEFAULT_EPSILON):
    """ECSW training end to end: contribution matrix, NNLS, reduced mesh."""
    training = build_ecsw_training(mesh, materials, rob, training_states, epsilon)
    alpha, converged = nnls_lawson_hanson(training.G, training.b, epsilon)
    if not converged:
        logger.warning("ECSW NNLS stopped above the %g target; using best weights",
                       epsilon)
    sel = np.flatnonzero(alpha > 0.0)
    logger.info("ECSW reduced mesh: %d of %d elements", sel.size, mesh.n_elements)
    return ReducedMesh(element_ids=sel, weights=alpha[sel], epsilon=epsilon), training


def hyperreduced_force(mesh, materials, rmesh, rob, y, u_ring, counters=None):
    """Weighted reduced force and tangent over the sampled elements only.

    Returns (f_r (s,), K_r (s, s)). Cost is proportional to the sampled
    element count; unsampled elements are never evaluated.
    """
    pack = mesh.pack(materials)
    V_el = basis_element_slices(mesh, rob, rmesh.element_ids)
    ubar_c = np.zeros(3 * mesh.n_nodes)
    ubar_c[mesh.c_dofs] = np.asarray(u_ring)[mesh.dof_pos[mesh.c_dofs]]
    f_r = np.empty(rob.s)
    K_r = np.empty((rob.s, rob.s))
    st = _k.hyper_force_tangent(np.ascontiguousarray(y, dtype=np.float64),
                                ubar_c, V_el, rmesh.element_ids, rmesh.weights,
                                pack.grad, pack.wdet, pack.kmu, pack.elem_dofs,
                                pack.mu_e, pack.lam_e, f_r, K_r)
    if st != _k.OK:
        raise SingularDeformationError("inverted sampled element")
    if counters is not None:
        counters[0] += rmesh.n_sampled
        counters[1] += rmesh.n_sampled
    return f_r, K_r


def solve_micro_hprom(bvp, rob, rmesh, y_guess=None, v_el=None, counters=None):
    """Hyperreduced Newton solve; per-iteration element work is exactly the
    sampled set. Returns (y, converged)."""
    mesh = bvp.mesh
    pack = mesh.pack(bvp.materials)
    if y_guess is None:
        y_guess = np.zeros(rob.s)
    y_guess = np.ascontiguousarray(y_guess, dtype=np.float64)
    if np.array_equal(bvp.F, np.eye(3)) and not y_guess.any():
        return np.zeros(rob.s), True
    if v_el is None:
        v_el = basis_element_slices(mesh, rob, rmesh.element_ids)
    y, it, st, nf, nt = _k.hprom_solve(
        bvp.F, rob.V, v_el, rmesh.element_ids, rmesh.weights, y_guess,
        pack.node_coords, pack.grad, pack.wdet, pack.kmu, pack.elem_dofs,
        pack.mu_e, pack.lam_e, pack.dof_kind, pack.dof_pos, pack.n_u,
        fe_core.TOL_REL, fe_core.TOL_ABS_FAC, pack.res_floor,
        fe_core.MAX_ITER)
    if counters is not None:
        counters[0] += nf * rmesh.n_sampled
        counters[1] += nt * rmesh.n_sampled
        counters[2] += it
    if st == _k.OK:
        return y, True
    if st == _k.BADSOLVE:
        raise LinearSolveError("singular hyperreduced tangent")
    return y, False
