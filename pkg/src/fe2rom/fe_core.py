"""Nonlinear hex8 finite element core for deformation-driven micro problems.

Total-Lagrangian formulation, compressible neo-Hookean material,
full 2x2x2 Gauss quadrature. The strain energy is

    W(F) = mu/2 (tr(F^T F) - 3) - mu ln J + lam/2 (ln J)^2,   J = det F

whose gradient is the first Piola-Kirchhoff stress

    P(F) = mu (F - F^{-T}) + lam ln J F^{-T}.

Degrees of freedom are partitioned into an unconstrained vector u and a
constrained vector u_ring driven by the boundary localization of a
prescribed deformation gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import (DivergenceError, LinearSolveError, MeshError,
                     SingularDeformationError)

# Newton policy: ||f|| <= (TOL_REL + TOL_ABS_FAC) * ||f(0, u_ring)||.
# The micro solutions feed snapshots and oracles, so they are driven far
# below the acceptance tolerance of the adaptive layer.
TOL_REL = 1.0e-9
TOL_ABS_FAC = 1.0e-14
MAX_ITER = 30

# below this deformation the micro response is floating-point cancellation
# noise: such states are solved directly by the full model and never used
# as training data
TINY_F = 1.0e-7


@dataclass(frozen=True)
class Material:
    """Compressible neo-Hookean material parameters.

    E : Young's modulus [Pa], nu : Poisson's ratio, rho : density [kg/m^3]
    (needed at the macro level only).
    """

    E: float
    nu: float
    rho: float | None = None

    def __post_init__(self):
        if not self.E > 0.0:
            raise MeshError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise MeshError(f"Poisson's ratio must be in (-1, 0.5), got {self.nu}")

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self):
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))


class Mesh:
    """Hex8 mesh with a constrained / unconstrained DOF partition.

    Parameters
    ----------
    node_coords : (n, 3) reference coordinates.
    elements : (ne, 8) node indices, bottom face counterclockwise then top.
    material_id : (ne,) indices into a material table.
    constrained_nodes : node indices whose 3 DOFs carry essential BCs,
        in a fixed order (defines the layout of the constrained vector).
    constrained_dofs : optional extra (node, direction) pairs constrained
        individually (used for symmetry planes at the macro level).
    """

    def __init__(self, node_coords, elements, material_id, constrained_nodes,
                 constrained_dofs=None):
        self.node_coords = np.ascontiguousarray(node_coords, dtype=np.float64)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.material_id = np.ascontiguousarray(material_id, dtype=np.int64)
        self.constrained_nodes = np.ascontiguousarray(constrained_nodes,
                                                      dtype=np.int64)
        if constrained_dofs is None:
            constrained_dofs = np.zeros((0, 2), dtype=np.int64)
        self.constrained_dofs = np.ascontiguousarray(constrained_dofs,
                                                     dtype=np.int64).reshape(-1, 2)
        self._validate()
        self._build_dof_partition()
        self._geom = None
        self._packs = {}

    # -- construction ------------------------------------------------------

    def _validate(self):
        n = self.n_nodes
        if self.node_coords.ndim != 2 or self.node_coords.shape[1] != 3:
            raise MeshError("node_coords must be (n, 3)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 8:
            raise MeshError("elements must be (ne, 8)")
        if self.material_id.shape[0] != self.elements.shape[0]:
            raise MeshError("one material id per element required")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise MeshError("element references an invalid node index")
        for e, conn in enumerate(self.elements):
            if len(set(conn.tolist())) != 8:
                raise MeshError(f"element {e} repeats a node index")
        used = np.zeros(n, dtype=bool)
        used[self.elements.ravel()] = True
        if not used.all():
            orphan = int(np.flatnonzero(~used)[0])
            raise MeshError(f"node {orphan} belongs to no element")
        cs = self.constrained_nodes
        if cs.size != np.unique(cs).size:
            raise MeshError("constrained_nodes contains duplicates")
        if cs.size and (cs.min() < 0 or cs.max() >= n):
            raise MeshError("constrained node index out of range")

    def _build_dof_partition(self):
        n = self.n_nodes
        kind = np.zeros(3 * n, dtype=np.int8)
        for node in self.constrained_nodes:
            kind[3 * node:3 * node + 3] = 1
        for node, d in self.constrained_dofs:
            if not (0 <= node < n and 0 <= d < 3):
                raise MeshError("constrained dof out of range")
            kind[3 * node + d] = 1
        pos = np.full(3 * n, -1, dtype=np.int64)
        # constrained block: constrained_nodes order, direction inner,
        # then the extra per-dof constraints in listed order
        c = 0
        for node in self.constrained_nodes:
            for d in range(3):
                pos[3 * node + d] = c
                c += 1
        for node, d in self.constrained_dofs:
            fd = 3 * node + d
            if pos[fd] < 0:
                pos[fd] = c
                c += 1
        u = 0
        for fd in range(3 * n):
            if kind[fd] == 0:
                pos[fd] = u
                u += 1
        self.dof_kind = kind
        self.dof_pos = pos
        self.n_u = u
        self.n_c = c
        self.u_dofs = np.flatnonzero(kind == 0).astype(np.int64)
        self.c_dofs = np.flatnonzero(kind == 1).astype(np.int64)

    # -- properties --------------------------------------------------------

    @property
    def n_nodes(self):
        return self.node_coords.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def cell_volume(self):
        """Reference volume of the bounding cell (voids included)."""
        span = self.node_coords.max(axis=0) - self.node_coords.min(axis=0)
        return float(np.prod(span))

    def geometry(self):
        """Precomputed shape gradients, weights and dof index arrays."""
        if self._geom is None:
            ne = self.n_elements
            grad = np.empty((ne, 8, 8, 3))
            wdet = np.empty((ne, 8))
            for e in range(ne):
                ge, we, st = _k.shape_gradients(self.node_coords[self.elements[e]])
                if st != _k.OK:
                    raise MeshError(f"element {e} has nonpositive reference Jacobian")
                grad[e] = ge
                wdet[e] = we
            elem_dofs = (3 * self.elements[:, :, None]
                         + np.arange(3)[None, None, :]).reshape(ne, 24)
            self._geom = {
                "grad": grad,
                "wdet": wdet,
                "elem_dofs": np.ascontiguousarray(elem_dofs, dtype=np.int64),
                "volume_material": float(wdet.sum()),
            }
        return self._geom

    def pack(self, materials):
        """Numba-ready arrays for this mesh and a material table."""
        key = tuple((m.E, m.nu) for m in materials)
        if key not in self._packs:
            geom = self.geometry()
            mid = self.material_id
            mu_e = np.array([materials[i].mu for i in mid])
            lam_e = np.array([materials[i].lam for i in mid])
            kmu = np.empty((self.n_elements, 24, 24))
            for e in range(self.n_elements):
                kmu[e] = _k.geometric_stiffness(geom["grad"][e], geom["wdet"][e],
                                                mu_e[e])
            # double-precision floor of the assembled force: the stress at
            # near-identity F is a catastrophic cancellation of O(mu) terms,
            # so residual norms below eps * (local stiffness flux) carry no
            # information and the Newton test must not chase them
            flux = np.zeros(3 * self.n_nodes)
            per_elem = (np.abs(geom["grad"])
                        * geom["wdet"][:, :, None, None]).sum(axis=(1, 3))
            for e in range(self.n_elements):
                scale = (mu_e[e] + abs(lam_e[e]))
                for a in range(8):
                    node = self.elements[e, a]
                    flux[3 * node:3 * node + 3] += scale * per_elem[e, a]
            res_floor = 32.0 * np.finfo(float).eps * float(
                np.linalg.norm(flux[self.u_dofs]))
            self._packs[key] = ModelPack(
                node_coords=self.node_coords,
                grad=geom["grad"], wdet=geom["wdet"],
                elem_dofs=geom["elem_dofs"], kmu=kmu,
                mu_e=mu_e, lam_e=lam_e,
                dof_kind=self.dof_kind, dof_pos=self.dof_pos,
                xc=np.ascontiguousarray(self.node_coords[self.constrained_nodes]),
                inv_vol=1.0 / self.cell_volume if self.cell_volume > 0 else 0.0,
                n_u=self.n_u, n_c=self.n_c, res_floor=res_floor)
        return self._packs[key]


@dataclass
class ModelPack:
    """Flat array bundle consumed by the compiled kernels."""

    node_coords: np.ndarray
    grad: np.ndarray
    wdet: np.ndarray
    elem_dofs: np.ndarray
    kmu: np.ndarray
    mu_e: np.ndarray
    lam_e: np.ndarray
    dof_kind: np.ndarray
    dof_pos: np.ndarray
    xc: np.ndarray
    inv_vol: float
    n_u: int
    n_c: int
    res_floor: float

    def args(self):
        return (self.node_coords, self.grad, self.wdet, self.kmu,
                self.elem_dofs, self.mu_e, self.lam_e, self.dof_kind,
                self.dof_pos, self.xc, self.inv_vol, self.n_u, self.n_c)

    def force_args(self):
        return (self.node_coords, self.grad, self.wdet, self.elem_dofs,
                self.mu_e, self.lam_e, self.dof_kind, self.dof_pos,
                self.xc, self.inv_vol, self.n_u, self.n_c)


@dataclass
class MicroBvp:
    """A micro boundary-value problem: RVE mesh, materials, driving F."""

    mesh: Mesh
    materials: list
    F: np.ndarray
    level: int = 1

    def __post_init__(self):
        self.F = np.ascontiguousarray(self.F, dtype=np.float64)
        if self.F.shape != (3, 3):
            raise MeshError("deformation gradient must be 3x3")
        if np.linalg.det(self.F) <= 0.0:
            raise SingularDeformationError(
                f"inadmissible deformation gradient, det F = {np.linalg.det(self.F)}")


@dataclass
class MicroSolution:
    """Converged micro state. history is a zero-length placeholder for
    hyperelastic materials so signatures stay uniform."""

    u: np.ndarray
    u_ring: np.ndarray
    newton_iterations: int
    converged: bool
    residual: float = 0.0
    f_ring: np.ndarray | None = None
    stress: np.ndarray | None = None
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    force_passes: int = 0
    tangent_passes: int = 0


# ---------------------------------------------------------------------------
# constitutive law
# ---------------------------------------------------------------------------

def neo_hookean_energy(F, material):
    """Strain energy density W(F)."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if J <= 0.0:
        raise SingularDeformationError(f"det F = {J} <= 0")
    mu, lam = material.mu, material.lam
    return 0.5 * mu * (np.trace(F.T @ F) - 3.0) - mu * np.log(J) \
        + 0.5 * lam * np.log(J) ** 2


def neo_hookean_stress(F, material):
    """First Piola-Kirchhoff stress P = dW/dF.

    Parameters
    ----------
    F : (3, 3) deformation gradient with det F > 0.
    material : Material

    Returns
    -------
    (3, 3) ndarray.
    """
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if J <= 0.0:
        raise SingularDeformationError(f"det F = {J} <= 0")
    Fit = np.linalg.inv(F).T
    return material.mu * (F - Fit) + material.lam * np.log(J) * Fit


# ---------------------------------------------------------------------------
# element and mesh level operations
# ---------------------------------------------------------------------------

def element_force_and_tangent(elem_coords, elem_disp, material):
    """Internal force (24,) and consistent tangent (24, 24) of one hex8.

    Node-major dof layout. Raises SingularDeformationError when the current
    configuration is inverted at a Gauss point, MeshError when the reference
    element is already invalid.
    """
    coords = np.ascontiguousarray(elem_coords, dtype=np.float64)
    disp = np.ascontiguousarray(elem_disp, dtype=np.float64)
    grad, wdet, st = _k.shape_gradients(coords)
    if st != _k.OK:
        raise MeshError("nonpositive reference Jacobian")
    kmu = _k.geometric_stiffness(grad, wdet, material.mu)
    fe = np.empty(24)
    ke = np.empty((24, 24))
    st = _k.element_force_tangent(grad, wdet, kmu, disp, material.mu,
                                  material.lam, fe, ke)
    if st != _k.OK:
        raise SingularDeformationError("inverted element configuration")
    return fe, ke


def apply_localization(mesh, F):
    """Boundary displacements u_ring from the coarse deformation gradient.

    Each constrained node gets (F - I) X, stacked by the mesh dof map.
    """
    F = np.asarray(F, dtype=float)
    if mesh.n_c == 0:
        raise MeshError("mesh has no constrained dofs")
    u_ring = np.empty(mesh.n_c)
    A = F - np.eye(3)
    vals = mesh.node_coords @ A.T
    for fd in mesh.c_dofs:
        node, d = divmod(int(fd), 3)
        u_ring[mesh.dof_pos[fd]] = vals[node, d]
    return u_ring


def full_vector(mesh, u, u_ring):
    """Concatenate partitioned vectors back to the full dof ordering."""
    ubar = np.empty(3 * mesh.n_nodes)
    ubar[mesh.u_dofs] = u
    ubar[mesh.c_dofs] = u_ring[mesh.dof_pos[mesh.c_dofs]]
    return ubar


def assemble_forces(mesh, materials, ubar):
    """Assembled internal forces split into (f, f_ring) by the dof map.

    ubar is the full displacement vector of length 3 * n_nodes. Element
    failures carry the offending element id.
    """
    ubar = np.ascontiguousarray(ubar, dtype=np.float64)
    if ubar.shape[0] != 3 * mesh.n_nodes:
        raise MeshError("full displacement vector has wrong length")
    pack = mesh.pack(materials)
    f_u = np.empty(mesh.n_u)
    f_c = np.empty(mesh.n_c)
    st, e = _k.assemble_force(ubar, pack.grad, pack.wdet, pack.elem_dofs,
                              pack.mu_e, pack.lam_e, pack.dof_kind,
                              pack.dof_pos, f_u, f_c)
    if st != _k.OK:
        raise SingularDeformationError(f"inverted configuration in element {e}",
                                       element=int(e))
    return f_u, f_c


def homogenize_stress(mesh, f_ring):
    """Volume-averaged first Piola-Kirchhoff stress from boundary reactions.

    P[i, J] = (1 / |B|) sum over constrained nodes of R[i] X[J], with |B|
    the reference volume of the bounding cell.
    """
    if mesh.cell_volume <= 0.0:
        raise MeshError("RVE has zero reference volume")
    if mesh.constrained_dofs.size:
        raise MeshError("homogenization requires whole-node constraints only")
    R = np.asarray(f_ring, dtype=float).reshape(-1, 3)
    X = mesh.node_coords[mesh.constrained_nodes]
    return (R.T @ X) / mesh.cell_volume


def solve_micro_hdm(bvp, u_guess=None):
    """Newton solution of the high-dimensional micro equilibrium.

    Full Newton steps from the warm start. A cold start far from the
    reference state can invert elements transiently; when that happens the
    boundary data is applied incrementally along F(t) = I + t (F - I) with
    adaptive bisection of the load path, every stage still taking full
    Newton steps and warm starting from the previous stage.

    Parameters
    ----------
    bvp : MicroBvp
    u_guess : optional warm start for the unconstrained vector.

    Returns
    -------
    MicroSolution with the reactions and homogenized stress attached.

    Raises
    ------
    DivergenceError when the smallest load increment still fails to
    converge, SingularDeformationError on unrecoverable element inversion,
    LinearSolveError on a non-finite Newton update.
    """
    mesh = bvp.mesh
    pack = mesh.pack(bvp.materials)
    if u_guess is None:
        u_guess = np.zeros(mesh.n_u)
    u_guess = np.ascontiguousarray(u_guess, dtype=np.float64)
    if np.array_equal(bvp.F, np.eye(3)) and not u_guess.any():
        return MicroSolution(u=np.zeros(mesh.n_u), u_ring=np.zeros(mesh.n_c),
                             newton_iterations=0, converged=True,
                             f_ring=np.zeros(mesh.n_c), stress=np.zeros((3, 3)))
    nf_total = 0
    nt_total = 0
    it_total = 0
    u, it, st, den, res, P, f_c, nf, nt = _k.hdm_solve(
        bvp.F, u_guess, *pack.args(), TOL_REL, TOL_ABS_FAC, pack.res_floor,
        MAX_ITER)
    nf_total, nt_total, it_total = int(nf), int(nt), int(it)
    if st in (_k.INVERTED, _k.MAXITER):
        # incremental loading from the stress-free state
        A = bvp.F - np.eye(3)
        u = np.zeros(mesh.n_u)
        t_done = 0.0
        targets = [1.0]
        min_step = 1.0 / 64.0
        while targets:
            t = targets[-1]
            Ft = np.eye(3) + t * A
            if np.linalg.det(Ft) <= 0.0:
                raise SingularDeformationError(
                    "load path crosses a singular deformation")
            ut, it, st, den, res, P, f_c, nf, nt = _k.hdm_solve(
                Ft, u, *pack.args(), TOL_REL, TOL_ABS_FAC, pack.res_floor,
                MAX_ITER)
            nf_total += int(nf)
            nt_total += int(nt)
            it_total += int(it)
            if st == _k.OK:
                u = ut
                t_done = t
                targets.pop()
            elif st == _k.BADSOLVE:
                raise LinearSolveError("singular tangent in micro Newton solve")
            else:
                if t - t_done < min_step:
                    break
                targets.append(0.5 * (t_done + t))
    if st == _k.INVERTED:
        raise SingularDeformationError("element inversion during Newton iteration")
    if st == _k.BADSOLVE:
        raise LinearSolveError("singular tangent in micro Newton solve")
    if st == _k.MAXITER:
        raise DivergenceError(
            f"micro Newton did not converge in {MAX_ITER} iterations "
            f"(relative residual {res / den if den else res:.3e})",
            last_residual=res)
    return MicroSolution(u=u, u_ring=apply_localization(mesh, bvp.F),
                         newton_iterations=it_total, converged=True,
                         residual=float(res / den) if den else 0.0,
                         f_ring=f_c, stress=P, force_passes=nf_total,
                         tangent_passes=nt_total)


def solve_micro_hdm_batch(mesh, materials, F_batch, U0, extrapolate=False,
                          U_prev2=None, counters=None):
    """Vectorized HDM solves for a batch of deformation gradients.

    Returns (U, P, iters, status). counters, when given, is a length-3 int64
    array accumulating (force passes, tangent passes, spare).
    """
    pack = mesh.pack(materials)
    nq = F_batch.shape[0]
    U_out = np.empty((nq, mesh.n_u))
    P_out = np.empty((nq, 3, 3))
    iters = np.zeros(nq, dtype=np.int64)
    status = np.zeros(nq, dtype=np.int64)
    if counters is None:
        counters = np.zeros(3, dtype=np.int64)
    if U_prev2 is None:
        U_prev2 = U0
    _k.hdm_solve_batch(np.ascontiguousarray(F_batch), U0, *pack.args(),
                       TOL_REL, TOL_ABS_FAC, pack.res_floor, MAX_ITER,
                       1 if extrapolate else 0, U_prev2,
                       U_out, P_out, iters, status, counters)
    return U_out, P_out, iters, status


def lumped_mass(mesh, materials):
    """Row-sum lumped diagonal mass, one entry per dof (3 per node).

    Total mass matches sum over elements of rho * reference volume exactly.
    """
    rho_e = np.empty(mesh.n_elements)
    for e in range(mesh.n_elements):
        rho = materials[mesh.material_id[e]].rho
        if rho is None or rho <= 0.0:
            raise MeshError(f"element {e} has no positive density")
        rho_e[e] = rho
    return _k.lumped_mass_kernel(mesh.node_coords, mesh.elements, rho_e)


def param_point(F):
    """Stack the columns of F into the 9-vector parameter point."""
    return np.asarray(F, dtype=float).reshape(9, order="F").copy()


def unstack_param(z):
    """Inverse of param_point."""
    return np.asarray(z, dtype=float).reshape(3, 3, order="F").copy()
