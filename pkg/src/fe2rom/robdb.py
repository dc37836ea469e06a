"""Database of local reduced-order bases indexed in deformation-gradient
parameter space.

Each entry couples a parameter matrix N_z (sampled 9-vectors), the snapshot
matrix N_u of the corresponding converged full solutions, an incrementally
updated SVD factorization, the energy-truncated basis, and the centroid of
its parameter samples. Queries select the entry with the nearest centroid,
solve with its (hyper)reduced model, and accept only when the full-mesh
relative residual passes the gate; otherwise the full model is solved, the
pair (z, u) enriches the selected entry, and the entry is split along its
principal parameter direction whenever the basis outgrows the capacity
limit.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from . import fe_core, hyperreduction, reduction
from .errors import Fe2RomError

logger = logging.getLogger(__name__)

DEFAULT_R_TOL = 1.0e-3
DEFAULT_C_MAX = 20
MAX_SPLIT_RECURSION = 10


@dataclass
class DbStats:
    queries: int = 0
    accepted: int = 0
    hdm_fallbacks: int = 0
    updates: int = 0
    splits: int = 0
    split_aborts: int = 0
    truncations: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class LocalBasisEntry:
    """One local basis: parameter samples, snapshots, factorization, centroid."""

    def __init__(self, entry_id, N_z, N_u, fact, rob, parent=None, generation=0):
        self.id = int(entry_id)
        self.N_z = np.ascontiguousarray(N_z, dtype=np.float64)
        self.N_u = np.ascontiguousarray(N_u, dtype=np.float64)
        self.fact = fact
        self.rob = rob
        self.parent = parent
        self.generation = int(generation)
        self.centroid = self.N_z.mean(axis=1)
        self.version = 0
        self._v_el = None
        self._v_el_version = -1

    @property
    def m(self):
        return self.N_z.shape[1]

    @property
    def s(self):
        return self.rob.s

    def element_slices(self, mesh, rmesh):
        """Cached basis slices for the shared reduced mesh; rebuilt after
        any basis mutation."""
        if self._v_el is None or self._v_el_version != self.version:
            self._v_el = hyperreduction.basis_element_slices(
                mesh, self.rob, rmesh.element_ids)
            self._v_el_version = self.version
        return self._v_el

    def column_hashes(self):
        return [hashlib.sha256(self.N_u[:, j].tobytes()).hexdigest()
                for j in range(self.m)]


@dataclass
class Database:
    """Adaptive collection of local bases sharing one frozen reduced mesh."""

    entries: list
    r_tol: float = DEFAULT_R_TOL
    c_max: int = DEFAULT_C_MAX
    energy_tol: float = reduction.DEFAULT_ENERGY_TOL
    reduced_mesh: hyperreduction.ReducedMesh | None = None
    stats: DbStats = field(default_factory=DbStats)
    next_id: int = 0
    total_samples: int = 0
    training_snapshots: np.ndarray | None = None
    instrument: bool = False

    def entry_index(self, entry_id):
        for i, e in enumerate(self.entries):
            if e.id == entry_id:
                return i
        raise KeyError(entry_id)


def select_entry(db, z_star):
    """Index of the entry whose centroid is nearest to the queried point.

    Exact exhaustive scan in the Euclidean norm; ties go to the lowest index.
    """
    if not db.entries:
        raise Fe2RomError("database has no entries")
    z = np.asarray(z_star, dtype=float)
    d = np.array([np.linalg.norm(e.centroid - z) for e in db.entries])
    return int(np.argmin(d))


def update_entry(entry, z_star, u_star, energy_tol=reduction.DEFAULT_ENERGY_TOL):
    """Append a sampled pair to an entry and refresh its truncated basis."""
    z = np.asarray(z_star, dtype=float).reshape(9, 1)
    u = np.asarray(u_star, dtype=float).reshape(-1, 1)
    entry.N_z = np.hstack([entry.N_z, z])
    entry.N_u = np.hstack([entry.N_u, u])
    entry.fact = reduction.svd_append_column(entry.fact, u.ravel())
    entry.rob = reduction.pod_truncate(entry.fact, energy_tol)
    entry.centroid = entry.N_z.mean(axis=1)
    entry.version += 1
    return entry


def principal_direction(N_z):
    """First eigenvector of the scatter-form covariance of the samples.

    Sign fixed so the first component of meaningful magnitude is positive,
    which makes splits deterministic.
    """
    m = N_z.shape[1]
    zbar = N_z.mean(axis=1)
    cov = N_z @ N_z.T - m * np.outer(zbar, zbar)
    vals, vecs = np.linalg.eigh(cov)
    n = vecs[:, -1]
    scale = np.abs(n).max()
    if scale > 0.0:
        for comp in n:
            if abs(comp) > 1.0e-12 * scale:
                if comp < 0.0:
                    n = -n
                break
    return n, float(vals[-1])


def _make_entry(db, N_z, N_u, parent, generation):
    fact = reduction.svd_from_matrix(N_u)
    rob = reduction.pod_truncate(fact, db.energy_tol)
    entry = LocalBasisEntry(db.next_id, N_z, N_u, fact, rob,
                            parent=parent, generation=generation)
    db.next_id += 1
    return entry


def split_entry(db, entry_index):
    """Split one entry across the hyperplane through its parameter centroid.

    The hyperplane is orthogonal to the direction of maximum variance of
    N_z; samples with positive signed distance form part 1, the rest
    (boundary included) part 2, and snapshots partition identically. Both
    children get fresh batch decompositions. A degenerate cloud (either
    side empty) aborts the split and enforces the capacity limit by
    truncating the basis instead.

    Returns the two new entries, or None when the split aborted.
    """
    entry = db.entries[entry_index]
    if entry.m < 2:
        _abort_split(db, entry)
        return None
    n, _ = principal_direction(entry.N_z)
    side = (entry.N_z - entry.centroid[:, None]).T @ n
    part1 = np.flatnonzero(side > 0.0)
    part2 = np.flatnonzero(side <= 0.0)
    if part1.size == 0 or part2.size == 0:
        _abort_split(db, entry)
        return None
    child1 = _make_entry(db, entry.N_z[:, part1], entry.N_u[:, part1],
                         parent=entry.id, generation=entry.generation + 1)
    child2 = _make_entry(db, entry.N_z[:, part2], entry.N_u[:, part2],
                         parent=entry.id, generation=entry.generation + 1)
    db.entries.pop(entry_index)
    db.entries.append(child1)
    db.entries.append(child2)
    db.stats.splits += 1
    logger.info("split entry %d (m=%d, s=%d) into %d (m=%d) and %d (m=%d)",
                entry.id, entry.m, entry.s, child1.id, child1.m,
                child2.id, child2.m)
    if db.instrument:
        validate_database(db)
    return child1, child2


def _abort_split(db, entry):
    entry.rob = reduction.pod_truncate(entry.fact, db.energy_tol, s_max=db.c_max)
    entry.version += 1
    db.stats.split_aborts += 1
    db.stats.truncations += 1
    logger.warning("split of entry %d aborted (degenerate parameter cloud); "
                   "basis truncated to capacity %d", entry.id, db.c_max)


def enforce_capacity(db, entry_index):
    """Split (recursively, bounded) until every affected entry fits c_max."""
    pending = [db.entries[entry_index].id]
    depth = 0
    while pending:
        if depth >= MAX_SPLIT_RECURSION:
            for eid in pending:
                entry = db.entries[db.entry_index(eid)]
                entry.rob = reduction.pod_truncate(entry.fact, db.energy_tol,
                                                   s_max=db.c_max)
                entry.version += 1
                db.stats.truncations += 1
                logger.warning("split recursion limit reached; entry %d truncated",
                               eid)
            break
        eid = pending.pop()
        idx = db.entry_index(eid)
        if db.entries[idx].s <= db.c_max:
            continue
        children = split_entry(db, idx)
        depth += 1
        if children is not None:
            for child in children:
                if child.s > db.c_max:
                    pending.append(child.id)


def ecsw_training_states(mesh, rob, F_list, U, amplify=5.0):
    """Training states for the reduced-mesh fit.

    Each sampled problem contributes three states: the zero interior state
    with its boundary data applied (the start of every Newton path, where
    element forces are large), the basis projection of its converged
    solution, and an amplitude-extrapolated copy of that pair. Training on
    converged states alone is degenerate here (assembled interior forces
    vanish at equilibrium, so the row sums are a near cancellation no
    sparse nonnegative subset can reproduce), and in-situ sampling starts
    at small amplitudes, so the amplified states are what keep the frozen
    reduced mesh accurate once the trajectory grows beyond the training
    window. Extrapolated states that would be inadmissible are skipped.
    """
    states = []
    for i, F in enumerate(F_list):
        u_ring = fe_core.apply_localization(mesh, F)
        y = rob.V.T @ U[i]
        states.append((np.zeros(rob.s), u_ring))
        states.append((y, u_ring))
        if amplify and amplify != 1.0:
            F_amp = np.eye(3) + amplify * (F - np.eye(3))
            if np.linalg.det(F_amp) > 0.5:
                states.append((amplify * y,
                               fe_core.apply_localization(mesh, F_amp)))
    return states


def train_frozen_mesh(mesh, materials, rob, F_list, U, epsilon):
    """ECSW training with a ladder of amplitude extrapolations.

    Strongly deformed extrapolated states can invert elements; retry with a
    gentler factor before settling for the sampled amplitudes alone.
    """
    last_exc = None
    for amplify in (5.0, 2.0, 1.0):
        states = ecsw_training_states(mesh, rob, F_list, U, amplify=amplify)
        try:
            rmesh, _ = hyperreduction.train_reduced_mesh(mesh, materials, rob,
                                                         states, epsilon)
            return rmesh
        except Fe2RomError as exc:
            last_exc = exc
            logger.warning("ECSW training failed at amplification %g: %s",
                           amplify, exc)
    raise last_exc


def initialize_db(mesh, materials, first_m_bvps, r_tol=DEFAULT_R_TOL,
                  c_max=DEFAULT_C_MAX, energy_tol=reduction.DEFAULT_ENERGY_TOL,
                  epsilon=hyperreduction.DEFAULT_EPSILON, instrument=False,
                  solutions=None):
    """Bootstrap the database from the first sampled micro problems.

    Solves every problem with the full model (or reuses precomputed
    converged solutions, one row per problem), builds one entry by batch
    POD of the snapshots, trains the ECSW reduced mesh once against that
    basis, and splits immediately (repeatedly) if the initial basis already
    exceeds the capacity limit. The reduced mesh stays frozen afterwards.

    Returns (Database, ReducedMesh).
    """
    if len(first_m_bvps) < 1:
        raise ValueError("initialization requires at least one micro problem")
    n_u = mesh.n_u
    m = len(first_m_bvps)
    if solutions is not None:
        U = np.asarray(solutions, dtype=float).reshape(m, n_u)
    else:
        F_batch = np.stack([b.F for b in first_m_bvps])
        U0 = np.zeros((m, n_u))
        U, P, iters, status = fe_core.solve_micro_hdm_batch(mesh, materials,
                                                            F_batch, U0)
        for q in np.flatnonzero(status != _k.OK):
            # incremental-loading retry; initialization failures are fatal
            U[q] = fe_core.solve_micro_hdm(first_m_bvps[q]).u
    N_u = np.ascontiguousarray(U.T)
    N_z = np.stack([fe_core.param_point(b.F) for b in first_m_bvps], axis=1)

    db = Database(entries=[], r_tol=r_tol, c_max=c_max, energy_tol=energy_tol,
                  instrument=instrument)
    entry = _make_entry(db, N_z, N_u, parent=None, generation=0)
    db.entries.append(entry)
    db.total_samples = m
    db.training_snapshots = N_u.copy()

    rmesh = train_frozen_mesh(mesh, materials, entry.rob,
                              [b.F for b in first_m_bvps], U, epsilon)
    db.reduced_mesh = rmesh
    if entry.s > c_max:
        enforce_capacity(db, 0)
    db.stats = DbStats()
    if db.instrument:
        validate_database(db)
    return db, rmesh


def query_with_update(db, bvp, warm_start=None, use_hyper=True):
    """Residual-gated query against the database (serial reference path).

    Solves with the nearest entry's reduced model, evaluates the full-mesh
    relative residual, and either accepts (used_hdm=False) or falls back to
    the full model, enriching the selected entry with the new sample and
    splitting on capacity overflow (used_hdm=True).

    Returns (MicroSolution, used_hdm).
    """
    mesh = bvp.mesh
    db.stats.queries += 1
    if np.array_equal(bvp.F, np.eye(3)):
        db.stats.accepted += 1
        sol = fe_core.MicroSolution(u=np.zeros(mesh.n_u),
                                    u_ring=np.zeros(mesh.n_c),
                                    newton_iterations=0, converged=True,
                                    f_ring=np.zeros(mesh.n_c),
                                    stress=np.zeros((3, 3)))
        return sol, False

    if np.abs(bvp.F - np.eye(3)).max() < fe_core.TINY_F:
        db.stats.hdm_fallbacks += 1
        return fe_core.solve_micro_hdm(bvp, u_guess=warm_start), True

    z_star = fe_core.param_point(bvp.F)
    j = select_entry(db, z_star)
    if db.instrument:
        _assert_selection_optimal(db, z_star, j)
    entry = db.entries[j]
    if warm_start is not None:
        y_guess = entry.rob.V.T @ warm_start
    else:
        y_guess = np.zeros(entry.s)

    if use_hyper:
        if db.reduced_mesh is None:
            raise Fe2RomError("no reduced mesh trained")
        v_el = entry.element_slices(mesh, db.reduced_mesh)
        y, converged = hyperreduction.solve_micro_hprom(
            bvp, entry.rob, db.reduced_mesh, y_guess, v_el=v_el)
    else:
        y, converged = reduction.solve_micro_prom(bvp, entry.rob, y_guess)

    u_approx = entry.rob.V @ y
    if converged and np.isfinite(u_approx).all():
        r = reduction.residual_indicator(bvp, u_approx)
    else:
        r = np.inf

    if r <= db.r_tol:
        db.stats.accepted += 1
        u_ring = fe_core.apply_localization(mesh, bvp.F)
        _, f_c = fe_core.assemble_forces(mesh, bvp.materials,
                                         fe_core.full_vector(mesh, u_approx, u_ring))
        sol = fe_core.MicroSolution(u=u_approx, u_ring=u_ring,
                                    newton_iterations=0, converged=True,
                                    residual=float(r), f_ring=f_c,
                                    stress=fe_core.homogenize_stress(mesh, f_c))
        return sol, False

    db.stats.hdm_fallbacks += 1
    guess = u_approx if np.isfinite(u_approx).all() else warm_start
    sol = fe_core.solve_micro_hdm(bvp, u_guess=guess)
    update_entry(entry, z_star, sol.u, db.energy_tol)
    db.total_samples += 1
    db.stats.updates += 1
    if entry.s > db.c_max:
        enforce_capacity(db, j)
    if db.instrument:
        validate_database(db)
    return sol, True


def _assert_selection_optimal(db, z_star, j):
    best = 0
    best_d = np.inf
    for i, e in enumerate(db.entries):
        d = float(np.sqrt(((e.centroid - z_star) ** 2).sum()))
        if d < best_d:
            best, best_d = i, d
    if best != j:
        raise Fe2RomError(f"selection not optimal: got {j}, scan found {best}")


def validate_database(db):
    """Assert the structural invariants; raises on the first violation."""
    if not db.entries:
        raise Fe2RomError("database must keep at least one entry")
    total = 0
    seen = {}
    for e in db.entries:
        if e.m < 1:
            raise Fe2RomError(f"entry {e.id} is empty")
        if e.N_z.shape[1] != e.N_u.shape[1]:
            raise Fe2RomError(f"entry {e.id} has mismatched column counts")
        if e.s > db.c_max:
            raise Fe2RomError(f"entry {e.id} exceeds capacity: s={e.s}")
        if np.linalg.norm(e.centroid - e.N_z.mean(axis=1)) > 1.0e-12 * (
                1.0 + np.linalg.norm(e.centroid)):
            raise Fe2RomError(f"entry {e.id} centroid out of date")
        gram = e.rob.V.T @ e.rob.V
        if np.abs(gram - np.eye(e.s)).max() > 1.0e-10:
            raise Fe2RomError(f"entry {e.id} basis lost orthonormality")
        total += e.m
        for h in e.column_hashes():
            if h in seen and seen[h] != e.id:
                raise Fe2RomError(
                    f"snapshot column shared by entries {seen[h]} and {e.id}")
            seen[h] = e.id
    if total != db.total_samples:
        raise Fe2RomError(
            f"sample conservation violated: {total} != {db.total_samples}")
    return True
