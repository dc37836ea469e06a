"""Two-scale explicit dynamics driver.

The macroscale is integrated with the central-difference scheme; every
Gauss-point stress evaluation dispatches a micro problem to one of three
engines: the full model (reference), the adaptive database of local reduced
bases, or a fixed nonadaptive reduced model trained on the first sampled
states. Work is tracked as element force / tangent evaluation counts, split
between solver work and acceptance-indicator work, so speedup mechanisms are
countable rather than timed.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from . import fe_core, hyperreduction, reduction, robdb
from .errors import ConfigError, Fe2RomError, SimulationBlowUpError

logger = logging.getLogger(__name__)

_DIRS = {"x": 0, "y": 1, "z": 2}


@dataclass
class TimeHistory:
    """Sampled macro trajectory: times (nt,), disp and vel (nt, n_nodes, 3)."""

    times: np.ndarray
    disp: np.ndarray
    vel: np.ndarray

    def same_grid(self, other, rtol=1e-9):
        if self.times.shape != other.times.shape:
            return False
        scale = max(abs(self.times[-1]), 1e-300)
        return bool(np.max(np.abs(self.times - other.times)) <= rtol * scale)


@dataclass
class WorkCounters:
    """Element-evaluation accounting for one run."""

    micro_queries: int = 0
    trivial_queries: int = 0
    accepted: int = 0
    fallbacks: int = 0
    init_solves: int = 0
    solver_force_evals: int = 0
    solver_tangent_evals: int = 0
    indicator_force_evals: int = 0
    reduced_iterations: int = 0
    full_iterations: int = 0
    hyper_force_passes: int = 0
    tiny_full_solves: int = 0
    r_exceed_logged: int = 0
    nonconverged_accepted: int = 0
    max_accepted_r: float = 0.0

    @property
    def solver_element_evals(self):
        return self.solver_force_evals + self.solver_tangent_evals

    @property
    def total_element_evals(self):
        return self.solver_element_evals + self.indicator_force_evals

    def to_dict(self):
        d = dict(self.__dict__)
        d["solver_element_evals"] = self.solver_element_evals
        d["total_element_evals"] = self.total_element_evals
        return d


@dataclass
class MacroState:
    """Macroscale trajectory state plus per-Gauss-point micro warm starts."""

    u_prev: np.ndarray
    u_curr: np.ndarray
    t: float
    step: int
    micro_u_prev: np.ndarray
    micro_u_prev2: np.ndarray
    F_prev: np.ndarray


@dataclass
class SimulationConfig:
    """Driver settings; mirrors the validated run-configuration file."""

    dt: float
    tf: float
    loading: dict
    t0: float = 0.0
    ds: float | None = None
    mode: str = "hdm"
    adaptive: bool = True
    m_init: int = 500
    n_train: int = 0
    collect_stride: int = 1
    r_tol: float = robdb.DEFAULT_R_TOL
    c_max: int = robdb.DEFAULT_C_MAX
    epsilon: float = hyperreduction.DEFAULT_EPSILON
    energy_tol: float = reduction.DEFAULT_ENERGY_TOL
    warm_start: str = "previous"
    instrument: bool = False
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.ds is None:
            self.ds = self.dt
        if self.dt <= 0 or self.tf <= self.t0:
            raise ConfigError("need dt > 0 and tf > t0")
        ratio = self.ds / self.dt
        if self.ds < self.dt or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("ds must be an integer multiple of dt")
        if self.mode not in ("hdm", "prom", "hprom"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def micro_mode(self):
        if self.mode == "hdm":
            return "hdm"
        return f"{self.mode}-{'adaptive' if self.adaptive else 'nonadaptive'}"

    @classmethod
    def from_dict(cls, cfg):
        keys = ("dt", "tf", "loading", "t0", "ds", "mode", "adaptive",
                "m_init", "n_train", "collect_stride", "r_tol", "c_max",
                "epsilon", "energy_tol", "warm_start", "instrument",
                "threads", "seed")
        return cls(**{k: cfg[k] for k in keys if k in cfg})


@dataclass
class RunResult:
    history: TimeHistory
    counters: WorkCounters
    config: SimulationConfig
    wall_time: float
    db: robdb.Database | None = None
    steps: int = 0


# ---------------------------------------------------------------------------
# macroscale kinematics and assembly
# ---------------------------------------------------------------------------

def gauss_point_deformation_gradient(macro_mesh, elem, gauss_index, u_macro):
    """F = I + sum_a u_a tensor grad N_a at one macro Gauss point.

    u_macro is the full macro displacement vector (3 * n_nodes).
    """
    geom = macro_mesh.geometry()
    d = u_macro[geom["elem_dofs"][elem]].reshape(8, 3)
    G = geom["grad"][elem, gauss_index]
    return np.eye(3) + d.T @ G


def all_deformation_gradients(macro_mesh, u_macro):
    """(ne * 8, 3, 3) deformation gradients, element-major, Gauss inner."""
    geom = macro_mesh.geometry()
    d = u_macro[geom["elem_dofs"]].reshape(-1, 8, 3)
    F = np.einsum("eai,egaJ->egiJ", d, geom["grad"])
    F += np.eye(3)
    return F.reshape(-1, 3, 3)


def macro_internal_force(macro_mesh, u_macro, micro_solver, f_external=None):
    """Internal minus external macro force on the unconstrained dofs.

    micro_solver maps a batch of deformation gradients (q, 3, 3) to the
    homogenized stresses (q, 3, 3); one micro problem per Gauss point of
    every macro element (8 per element).
    """
    geom = macro_mesh.geometry()
    F_all = all_deformation_gradients(macro_mesh, u_macro)
    P_all = micro_solver(F_all).reshape(-1, 8, 3, 3)
    fe = np.einsum("eg,egiJ,egaJ->eai", geom["wdet"], P_all, geom["grad"])
    f_full = np.zeros(3 * macro_mesh.n_nodes)
    np.add.at(f_full, geom["elem_dofs"].ravel(), fe.reshape(-1, 24).ravel())
    f = f_full[macro_mesh.u_dofs]
    if f_external is not None:
        f = f - f_external
    return f


def pressure_load_vector(mesh, face, direction):
    """Work-equivalent nodal forces of a unit reference-configuration
    pressure on one boundary face of a box mesh, fixed direction."""
    from .meshgen import _FACE_AXES, _face_nodes
    if face not in _FACE_AXES:
        raise ConfigError(f"unknown face {face!r}")
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (3,):
        raise ConfigError("loading direction must have 3 components")
    face_nodes = set(_face_nodes(mesh.node_coords, face).tolist())
    local_faces = ((0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4),
                   (3, 2, 6, 7), (0, 3, 7, 4), (1, 2, 6, 5))
    load = np.zeros(3 * mesh.n_nodes)
    total_area = 0.0
    for conn in mesh.elements:
        for lf in local_faces:
            quad = [int(conn[a]) for a in lf]
            if all(node in face_nodes for node in quad):
                x = mesh.node_coords[quad]
                area = 0.5 * (np.linalg.norm(np.cross(x[1] - x[0], x[2] - x[0]))
                              + np.linalg.norm(np.cross(x[2] - x[0], x[3] - x[0])))
                total_area += area
                for node in quad:
                    load[3 * node:3 * node + 3] += 0.25 * area * direction
    if total_area == 0.0:
        raise ConfigError(f"no element faces found on {face}")
    return load


def _load_profile(loading, t0, tf):
    if loading["type"] != "pressure":
        return lambda t: 0.0
    p = loading["magnitude"]
    if loading.get("profile", "constant") == "linear_ramp":
        return lambda t: p * (t - t0) / (tf - t0)
    return lambda t: p


# ---------------------------------------------------------------------------
# micro dispatchers
# ---------------------------------------------------------------------------

class _HdmDispatcher:
    """Reference engine: every query is a full Newton solve."""

    uses_db = False

    def __init__(self, mesh, materials, nq, extrapolate):
        self.mesh = mesh
        self.materials = materials
        self.counters = WorkCounters()
        self.extrapolate = extrapolate
        self.U_prev = np.zeros((nq, mesh.n_u))
        self.U_prev2 = np.zeros((nq, mesh.n_u))
        self.db = None

    def evaluate(self, F_all, t):
        nq = F_all.shape[0]
        mesh = self.mesh
        c = self.counters
        c.micro_queries += nq
        raw = np.zeros(3, dtype=np.int64)
        U, P, iters, status = fe_core.solve_micro_hdm_batch(
            mesh, self.materials, F_all, self.U_prev,
            extrapolate=self.extrapolate, U_prev2=self.U_prev2, counters=raw)
        ne = mesh.n_elements
        c.solver_force_evals += int(raw[0]) * ne
        c.solver_tangent_evals += int(raw[1]) * ne
        c.full_iterations += int(iters.sum())
        for q in np.flatnonzero(status != _k.OK):
            # retry with incremental loading; raises with context on failure
            try:
                bvp = fe_core.MicroBvp(mesh=mesh, materials=self.materials,
                                       F=F_all[q])
                sol = fe_core.solve_micro_hdm(bvp, u_guess=self.U_prev[q])
            except Fe2RomError as exc:
                raise Fe2RomError(
                    f"micro solve failed at gauss point {q} "
                    f"(element {q // 8}, gauss {q % 8}): {exc}") from exc
            U[q] = sol.u
            P[q] = sol.stress
            c.solver_force_evals += sol.force_passes * ne
            c.solver_tangent_evals += sol.tangent_passes * ne
            c.full_iterations += sol.newton_iterations
        c.trivial_queries += int(np.sum(np.abs(F_all - np.eye(3)).max(axis=(1, 2))
                                        == 0.0))
        self.U_prev2 = self.U_prev
        self.U_prev = U
        return P


class _RomDispatcher:
    """Shared machinery for the adaptive and nonadaptive reduced engines."""

    def __init__(self, mesh, materials, nq, cfg, use_hyper):
        self.mesh = mesh
        self.materials = materials
        self.cfg = cfg
        self.use_hyper = use_hyper
        self.counters = WorkCounters()
        self.extrapolate = 1 if cfg.warm_start == "extrapolated" else 0
        self.U_prev = np.zeros((nq, mesh.n_u))
        self.U_prev2 = np.zeros((nq, mesh.n_u))
        self.db = None
        self._init_F = []
        self._init_U = []
        self._live_seen = 0

    # -- initialization by full solves -------------------------------------

    def _n_init(self):
        raise NotImplementedError

    def _collect(self, F_all, t, P_out, U_new):
        """Full solves for one whole macro sweep during the training phase.

        Every query of the sweep is solved by the full model; the snapshots
        harvested for training are strided across the sweep's meaningful
        (above the noise floor) states so one sweep already samples the
        spatial variety of the loading. Returns the index of the first
        query not consumed here (always the end: the sweep that completes
        the budget is solved fully, the reduced engine starts next sweep).
        """
        mesh = self.mesh
        c = self.counters
        ne = mesh.n_elements
        nq = F_all.shape[0]
        dev = np.abs(F_all - np.eye(3)).max(axis=(1, 2))
        live = np.flatnonzero(dev >= fe_core.TINY_F)
        want = self._n_init() - len(self._init_F)
        stride = max(int(self.cfg.collect_stride), 1)
        harvest = np.zeros(0, dtype=np.int64)
        if want > 0 and live.size:
            # every stride-th meaningful state across sweeps; stride > 1
            # spreads the training window over the early trajectory
            offsets = (self._live_seen + np.arange(live.size)) % stride == 0
            harvest = live[offsets][:want]
        self._live_seen += int(live.size)
        c.micro_queries += nq
        c.trivial_queries += int((dev == 0.0).sum())
        raw = np.zeros(3, dtype=np.int64)
        U, P, iters, status = fe_core.solve_micro_hdm_batch(
            mesh, self.materials, F_all, self.U_prev, counters=raw)
        for q in np.flatnonzero(status != _k.OK):
            sol = fe_core.solve_micro_hdm(
                fe_core.MicroBvp(mesh=mesh, materials=self.materials,
                                 F=F_all[q]), u_guess=self.U_prev[q])
            U[q] = sol.u
            P[q] = sol.stress
            raw[0] += sol.force_passes
            raw[1] += sol.tangent_passes
            iters[q] = sol.newton_iterations
        c.init_solves += int(live.size)
        c.solver_force_evals += int(raw[0]) * ne
        c.solver_tangent_evals += int(raw[1]) * ne
        c.full_iterations += int(iters.sum())
        P_out[:] = P
        U_new[:] = U
        for q in harvest:
            self._init_F.append(F_all[q].copy())
            self._init_U.append(U[q].copy())
        if len(self._init_F) >= self._n_init():
            self._build()
        return nq

    def _build(self):
        raise NotImplementedError

    def evaluate(self, F_all, t):
        nq = F_all.shape[0]
        P_out = np.zeros((nq, 3, 3))
        U_new = np.zeros((nq, self.mesh.n_u))
        start = 0
        if self.db is None:
            start = self._collect(F_all, t, P_out, U_new)
        if start < nq:
            self._evaluate_batch(F_all, start, P_out, U_new)
        self.U_prev2 = self.U_prev
        self.U_prev = U_new
        return P_out

    # -- batched reduced queries -------------------------------------------

    def _group_by_entry(self, F_sub):
        z = F_sub.transpose(0, 2, 1).reshape(-1, 9)
        cents = np.stack([e.centroid for e in self.db.entries])
        d2 = ((cents[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=0)

    def _solve_group(self, entry, F_grp, idx_grp):
        """Run one entry's batch kernel; returns per-query arrays."""
        mesh = self.mesh
        pack = mesh.pack(self.materials)
        cfg = self.cfg
        k = F_grp.shape[0]
        s = entry.s
        Y = np.zeros((k, s))
        U = np.zeros((k, mesh.n_u))
        r = np.zeros(k)
        P = np.zeros((k, 3, 3))
        iters = np.zeros(k, dtype=np.int64)
        status = np.zeros(k, dtype=np.int64)
        nf = np.zeros(k, dtype=np.int64)
        nt = np.zeros(k, dtype=np.int64)
        warm = np.ascontiguousarray(self.U_prev[idx_grp])
        warm2 = np.ascontiguousarray(self.U_prev2[idx_grp])
        if self.use_hyper:
            rmesh = self.db.reduced_mesh
            v_el = entry.element_slices(mesh, rmesh)
            passes = np.zeros(k, dtype=np.int64)
            _k.hprom_query_batch(
                np.ascontiguousarray(F_grp), warm, entry.rob.V, v_el,
                rmesh.element_ids, rmesh.weights, *pack.args(),
                fe_core.TOL_REL, fe_core.TOL_ABS_FAC, pack.res_floor,
                fe_core.MAX_ITER, self.extrapolate, warm2, Y, U, r, P, iters,
                status, nf, nt, passes)
            self.counters.solver_force_evals += int(nf.sum()) * rmesh.n_sampled
            self.counters.solver_tangent_evals += int(nt.sum()) * rmesh.n_sampled
            self.counters.indicator_force_evals += int(passes.sum()) * mesh.n_elements
            self.counters.hyper_force_passes += int(nf.sum())
        else:
            _k.prom_query_batch(
                np.ascontiguousarray(F_grp), warm, entry.rob.V, *pack.args(),
                fe_core.TOL_REL, fe_core.TOL_ABS_FAC, pack.res_floor,
                fe_core.MAX_ITER, self.extrapolate, warm2, Y, U, r, P, iters,
                status, nf, nt)
            self.counters.solver_force_evals += int(nf.sum()) * mesh.n_elements
            self.counters.solver_tangent_evals += int(nt.sum()) * mesh.n_elements
        self.counters.reduced_iterations += int(iters.sum())
        return Y, U, r, P, status

    def _evaluate_batch(self, F_all, start, P_out, U_new):
        raise NotImplementedError


class _AdaptiveDispatcher(_RomDispatcher):
    """Residual-gated queries against the local-basis database.

    Within a step, accepted queries read a step-start snapshot of the
    database; queries whose residual exceeds the gate are reprocessed
    serially in index order against the live database, falling back to the
    full model and enriching it.
    """

    uses_db = True

    def _n_init(self):
        return self.cfg.m_init

    def _build(self):
        cfg = self.cfg
        bvps = [fe_core.MicroBvp(mesh=self.mesh, materials=self.materials, F=F)
                for F in self._init_F]
        self.db, _ = robdb.initialize_db(
            self.mesh, self.materials, bvps, r_tol=cfg.r_tol, c_max=cfg.c_max,
            energy_tol=cfg.energy_tol, epsilon=cfg.epsilon,
            instrument=cfg.instrument,
            solutions=np.array(self._init_U))
        self._init_F.clear()
        self._init_U.clear()
        logger.info("database initialized: %d entries, reduced mesh %d elements",
                    len(self.db.entries), self.db.reduced_mesh.n_sampled)

    def _evaluate_batch(self, F_all, start, P_out, U_new):
        """Round-based step processing.

        All pending queries are solved in one batched sweep against the
        current database snapshot; if any fail the gate, the first failure
        (in Gauss-point order) is solved by the full model and enriches the
        database, then the remaining failures are re-batched against the
        updated database. One update thus serves every similar state in
        the step, and the per-step cost stays proportional to the number
        of genuinely new regions, not to the number of gated-out queries.
        """
        mesh = self.mesh
        c = self.counters
        db = self.db
        nq = F_all.shape[0] - start
        c.micro_queries += nq
        db.stats.queries += nq
        sub = np.arange(start, F_all.shape[0])
        F_sub = F_all[sub]
        dev = np.abs(F_sub - np.eye(3)).max(axis=(1, 2))
        trivial = dev == 0.0
        c.trivial_queries += int(trivial.sum())
        db.stats.accepted += int(trivial.sum())
        c.accepted += int(trivial.sum())
        tiny = (~trivial) & (dev < fe_core.TINY_F)
        if tiny.any():
            # featureless states: solve directly, never gate or train on them
            idx = sub[tiny]
            raw = np.zeros(3, dtype=np.int64)
            Ut, Pt, its, stt = fe_core.solve_micro_hdm_batch(
                mesh, self.materials, np.ascontiguousarray(F_all[idx]),
                np.ascontiguousarray(self.U_prev[idx]), counters=raw)
            ne = mesh.n_elements
            c.solver_force_evals += int(raw[0]) * ne
            c.solver_tangent_evals += int(raw[1]) * ne
            c.full_iterations += int(its.sum())
            c.tiny_full_solves += idx.size
            db.stats.hdm_fallbacks += idx.size
            for pos, q in enumerate(idx):
                P_out[q] = Pt[pos]
                U_new[q] = Ut[pos]
        pending = sub[(~trivial) & (~tiny)]
        rounds = 0
        accepted_last_round = 1
        while pending.size:
            owners = self._group_by_entry(F_all[pending])
            failures = []
            accepted_this_round = 0
            for j in np.unique(owners):
                grp = pending[owners == j]
                Y, U, r, P, status = self._solve_group(db.entries[j],
                                                       F_all[grp], grp)
                ok = (status == _k.OK) & (r <= db.r_tol)
                for pos, q in enumerate(grp):
                    if ok[pos]:
                        P_out[q] = P[pos]
                        U_new[q] = U[pos]
                        c.accepted += 1
                        accepted_this_round += 1
                        db.stats.accepted += 1
                        c.max_accepted_r = max(c.max_accepted_r, float(r[pos]))
                    else:
                        failures.append((int(q),
                                         U[pos] if np.isfinite(U[pos]).all()
                                         else self.U_prev[q]))
            if not failures:
                break
            failures.sort(key=lambda t: t[0])
            if rounds > 0 and accepted_this_round == 0:
                # re-solving is not paying off: the remaining states are
                # individually novel, enrich them all directly
                for q, guess in failures:
                    self._enrich(F_all[q], q, guess, P_out, U_new)
                break
            q, guess = failures[0]
            self._enrich(F_all[q], q, guess, P_out, U_new)
            pending = np.array([f[0] for f in failures[1:]], dtype=np.int64)
            rounds += 1
            if rounds > nq:
                raise Fe2RomError("adaptive step failed to terminate")

    def _enrich(self, F, q, guess, P_out, U_new):
        """Full solve of one gated-out query plus the database update."""
        mesh = self.mesh
        c = self.counters
        db = self.db
        ne = mesh.n_elements
        bvp = fe_core.MicroBvp(mesh=mesh, materials=self.materials, F=F)
        z_star = fe_core.param_point(F)
        j = robdb.select_entry(db, z_star)
        if db.instrument:
            robdb._assert_selection_optimal(db, z_star, j)
        entry = db.entries[j]
        c.fallbacks += 1
        db.stats.hdm_fallbacks += 1
        g = guess if np.isfinite(guess).all() else None
        sol = fe_core.solve_micro_hdm(bvp, u_guess=g)
        c.solver_force_evals += sol.force_passes * ne
        c.solver_tangent_evals += sol.tangent_passes * ne
        c.full_iterations += sol.newton_iterations
        robdb.update_entry(entry, z_star, sol.u, db.energy_tol)
        db.total_samples += 1
        db.stats.updates += 1
        if entry.s > db.c_max:
            robdb.enforce_capacity(db, j)
        if db.instrument:
            robdb.validate_database(db)
        P_out[q] = sol.stress
        U_new[q] = sol.u


class _NonadaptiveDispatcher(_RomDispatcher):
    """Fixed global basis trained on the first sampled states; no gate, no
    updates. The residual indicator is still computed and logged."""

    uses_db = False

    def _n_init(self):
        return max(self.cfg.n_train, 1)

    def _build(self):
        cfg = self.cfg
        U = np.array(self._init_U)
        fact = reduction.svd_from_matrix(U.T)
        self.rob = reduction.pod_truncate(fact, cfg.energy_tol)
        self.rmesh = None
        self._v_el = None
        if self.use_hyper:
            self.rmesh = robdb.train_frozen_mesh(
                self.mesh, self.materials, self.rob, self._init_F,
                np.array(self._init_U), cfg.epsilon)
            self._v_el = hyperreduction.basis_element_slices(
                self.mesh, self.rob, self.rmesh.element_ids)
        self.db = object()  # sentinel: training is complete
        self._init_F.clear()
        self._init_U.clear()
        logger.info("nonadaptive basis trained: s=%d%s", self.rob.s,
                    f", reduced mesh {self.rmesh.n_sampled}" if self.rmesh
                    else "")

    def _evaluate_batch(self, F_all, start, P_out, U_new):
        mesh = self.mesh
        pack = mesh.pack(self.materials)
        cfg = self.cfg
        c = self.counters
        sub = np.arange(start, F_all.shape[0])
        c.micro_queries += sub.size
        F_sub = np.ascontiguousarray(F_all[sub])
        k = sub.size
        s = self.rob.s
        Y = np.zeros((k, s))
        U = np.zeros((k, mesh.n_u))
        r = np.zeros(k)
        P = np.zeros((k, 3, 3))
        iters = np.zeros(k, dtype=np.int64)
        status = np.zeros(k, dtype=np.int64)
        nf = np.zeros(k, dtype=np.int64)
        nt = np.zeros(k, dtype=np.int64)
        warm = np.ascontiguousarray(self.U_prev[sub])
        warm2 = np.ascontiguousarray(self.U_prev2[sub])
        if self.use_hyper:
            passes = np.zeros(k, dtype=np.int64)
            _k.hprom_query_batch(
                F_sub, warm, self.rob.V, self._v_el, self.rmesh.element_ids,
                self.rmesh.weights, *pack.args(), fe_core.TOL_REL,
                fe_core.TOL_ABS_FAC, pack.res_floor, fe_core.MAX_ITER,
                self.extrapolate, warm2, Y, U, r, P, iters, status, nf, nt,
                passes)
            c.solver_force_evals += int(nf.sum()) * self.rmesh.n_sampled
            c.solver_tangent_evals += int(nt.sum()) * self.rmesh.n_sampled
            c.indicator_force_evals += int(passes.sum()) * mesh.n_elements
            c.hyper_force_passes += int(nf.sum())
        else:
            _k.prom_query_batch(
                F_sub, warm, self.rob.V, *pack.args(), fe_core.TOL_REL,
                fe_core.TOL_ABS_FAC, pack.res_floor, fe_core.MAX_ITER,
                self.extrapolate, warm2, Y, U, r, P, iters, status, nf, nt)
            c.solver_force_evals += int(nf.sum()) * mesh.n_elements
            c.solver_tangent_evals += int(nt.sum()) * mesh.n_elements
        c.reduced_iterations += int(iters.sum())
        dev = np.abs(F_sub - np.eye(3)).max(axis=(1, 2))
        trivial = dev == 0.0
        c.trivial_queries += int(trivial.sum())
        exceed = (dev >= fe_core.TINY_F) & ((r > cfg.r_tol) | ~np.isfinite(r))
        if exceed.any():
            c.r_exceed_logged += int(exceed.sum())
            logger.debug("nonadaptive: %d residual indicators above %g at t-step",
                         int(exceed.sum()), cfg.r_tol)
        for pos, q in enumerate(sub):
            if status[pos] == _k.OK or status[pos] == _k.MAXITER:
                if status[pos] == _k.MAXITER:
                    c.nonconverged_accepted += 1
                P_out[q] = P[pos]
                U_new[q] = U[pos]
                c.accepted += 1
            else:
                # keep the run alive on the previous state; log loudly
                c.nonconverged_accepted += 1
                logger.warning("nonadaptive query %d failed (status %d); "
                               "holding previous micro state", q, status[pos])
                U_new[q] = self.U_prev[q]
                bvp = fe_core.MicroBvp(mesh=mesh, materials=self.materials,
                                       F=F_all[q])
                u_ring = fe_core.apply_localization(mesh, F_all[q])
                _, f_c = fe_core.assemble_forces(
                    mesh, self.materials,
                    fe_core.full_vector(mesh, self.U_prev[q], u_ring))
                c.indicator_force_evals += mesh.n_elements
                P_out[q] = fe_core.homogenize_stress(mesh, f_c)


def _make_dispatcher(cfg, rve_mesh, rve_materials, nq):
    extrap = 1 if cfg.warm_start == "extrapolated" else 0
    if cfg.mode == "hdm":
        return _HdmDispatcher(rve_mesh, rve_materials, nq, extrap)
    if cfg.adaptive:
        return _AdaptiveDispatcher(rve_mesh, rve_materials, nq, cfg,
                                   use_hyper=(cfg.mode == "hprom"))
    if cfg.n_train < 1:
        raise ConfigError("nonadaptive modes need n_train >= 1")
    return _NonadaptiveDispatcher(rve_mesh, rve_materials, nq, cfg,
                                  use_hyper=(cfg.mode == "hprom"))


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------

def central_difference_run(config, macro_mesh, macro_materials, rve_mesh,
                           rve_materials):
    """Explicit two-scale run.

    u^{n+1} = 2 u^n - u^{n-1} + dt^2 M^{-1} (-f(u^n)) with the one-step
    starter u^1 = u^0 + dt v^0 + dt^2/2 M^{-1}(-f(u^0)); velocities by
    central differences. States are recorded at every ds.
    """
    t_start = time.perf_counter()
    cfg = config
    mesh = macro_mesh
    mass = fe_core.lumped_mass(mesh, macro_materials)[mesh.u_dofs]
    if (mass <= 0.0).any():
        raise ConfigError("lumped mass must be strictly positive")
    nq = mesh.n_elements * 8
    dispatcher = _make_dispatcher(cfg, rve_mesh, rve_materials, nq)

    load = cfg.loading
    n_u = mesh.n_u
    v0_full = np.zeros(3 * mesh.n_nodes)
    f_ext_u = np.zeros(n_u)
    profile = _load_profile(load, cfg.t0, cfg.tf)
    unit_load = None
    wall_penalty = 0.0
    if load["type"] == "pressure":
        unit_load = pressure_load_vector(mesh, load["face"],
                                         load["direction"])[mesh.u_dofs]
    else:
        v = np.asarray(load["velocity"], dtype=float)
        v0_full[:] = np.tile(v, mesh.n_nodes)
        wall_penalty = float(load.get("rigid_wall_penalty", 0.0))

    def force(u_vec, t):
        ubar = np.zeros(3 * mesh.n_nodes)
        ubar[mesh.u_dofs] = u_vec
        f_ext = unit_load * profile(t) if unit_load is not None else None
        f = macro_internal_force(mesh, ubar, lambda F: dispatcher.evaluate(F, t),
                                 f_external=f_ext)
        if wall_penalty > 0.0:
            z = mesh.node_coords.ravel()[
                np.arange(2, 3 * mesh.n_nodes, 3)] + ubar[2::3]
            pen = np.zeros(3 * mesh.n_nodes)
            pen[2::3] = wall_penalty * np.minimum(z, 0.0)
            f = f + pen[mesh.u_dofs]
        return f

    n_steps = int(round((cfg.tf - cfg.t0) / cfg.dt))
    if abs(cfg.t0 + n_steps * cfg.dt - cfg.tf) > 1e-9 * max(abs(cfg.tf), 1.0):
        raise ConfigError("tf - t0 must be an integer number of time steps")
    rec_every = int(round(cfg.ds / cfg.dt))
    if n_steps % rec_every != 0:
        raise ConfigError("ds must divide the simulated interval so tf is sampled")

    u0 = np.zeros(n_u)
    v0 = v0_full[mesh.u_dofs]
    f0 = force(u0, cfg.t0)
    u1 = u0 + cfg.dt * v0 + 0.5 * cfg.dt ** 2 * (-f0) / mass

    times, disp, vel = [], [], []

    def record(t, u_vec, v_vec):
        times.append(t)
        du = np.zeros((mesh.n_nodes, 3))
        dv = np.zeros((mesh.n_nodes, 3))
        du.reshape(-1)[mesh.u_dofs] = u_vec
        dv.reshape(-1)[mesh.u_dofs] = v_vec
        disp.append(du)
        vel.append(dv)

    record(cfg.t0, u0, v0)
    u_prev, u_curr = u0, u1
    for n in range(1, n_steps + 1):
        t_n = cfg.t0 + n * cfg.dt
        f = force(u_curr, t_n)
        u_next = 2.0 * u_curr - u_prev + cfg.dt ** 2 * (-f) / mass
        if not np.isfinite(u_next).all():
            raise SimulationBlowUpError(
                f"non-finite macro state at step {n} (t={t_n:g})", step=n)
        v_curr = (u_next - u_prev) / (2.0 * cfg.dt)
        if n % rec_every == 0:
            record(t_n, u_curr, v_curr)
        u_prev, u_curr = u_curr, u_next

    history = TimeHistory(times=np.array(times),
                          disp=np.stack(disp), vel=np.stack(vel))
    wall = time.perf_counter() - t_start
    return RunResult(history=history, counters=dispatcher.counters,
                     config=cfg, wall_time=wall,
                     db=dispatcher.db if dispatcher.uses_db else None,
                     steps=n_steps)


def run_nonadaptive(config, macro_mesh, macro_materials, rve_mesh,
                    rve_materials):
    """Fixed-basis counterpart: train once on the first n_train sampled
    problems, then reuse the global reduced model without gating."""
    if config.mode == "hdm":
        raise ConfigError("nonadaptive runs need a reduced mode")
    cfg = config
    if cfg.adaptive:
        cfg = SimulationConfig(**{**cfg.__dict__, "adaptive": False})
    return central_difference_run(cfg, macro_mesh, macro_materials, rve_mesh,
                                  rve_materials)


# ---------------------------------------------------------------------------
# error metric
# ---------------------------------------------------------------------------

def relative_global_error(history_ref, history_test, ds, direction,
                          quantity="displacement"):
    """Relative global error in percent for one direction.

    |sum_t ds (u - u~)^T 1 / sum_t ds u^T 1| * 100 over the shared sample
    grid. Returns None (undefined) when the reference sum is zero.
    """
    if not history_ref.same_grid(history_test):
        raise ConfigError("histories are not on the same sampling grid")
    d = _DIRS[direction] if isinstance(direction, str) else int(direction)
    a = history_ref.disp if quantity == "displacement" else history_ref.vel
    b = history_test.disp if quantity == "displacement" else history_test.vel
    num = ds * float((a[:, :, d] - b[:, :, d]).sum())
    den = ds * float(a[:, :, d].sum())
    if den == 0.0:
        return None
    return abs(num / den) * 100.0


def error_report(history_ref, history_test, ds, directions=("x", "y", "z")):
    """Per-direction displacement and velocity errors, mirroring the
    reporting layout of the reference experiments."""
    report = {}
    for quantity in ("displacement", "velocity"):
        for d in directions:
            report[f"{d}-{quantity}"] = relative_global_error(
                history_ref, history_test, ds, d, quantity)
    return report
