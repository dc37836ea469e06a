"""File formats and persistence: JSON meshes, ROMX binary matrices, run
configuration with strict key validation, manifests, histories, and the
on-disk database layout."""

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from . import hyperreduction, reduction, robdb
from .errors import ConfigError, IntegrityError
from .fe_core import Material, Mesh

logger = logging.getLogger(__name__)

ROMX_MAGIC = b"ROMX"
ROMX_VERSION = 1
CONFIG_VERSION = 1
TOOL_VERSION = "0.1.0"


# ---------------------------------------------------------------------------
# mesh JSON
# ---------------------------------------------------------------------------

def mesh_to_dict(mesh, materials):
    d = {
        "nodes": mesh.node_coords.tolist(),
        "elements": mesh.elements.tolist(),
        "material_ids": mesh.material_id.tolist(),
        "constrained_nodes": mesh.constrained_nodes.tolist(),
        "materials": [{"E": m.E, "nu": m.nu, "rho": m.rho} for m in materials],
    }
    if mesh.constrained_dofs.size:
        d["constrained_dofs"] = mesh.constrained_dofs.tolist()
    return d


def mesh_from_dict(d):
    materials = [Material(E=m["E"], nu=m["nu"], rho=m.get("rho"))
                 for m in d["materials"]]
    mesh = Mesh(np.asarray(d["nodes"], dtype=float),
                np.asarray(d["elements"], dtype=np.int64),
                np.asarray(d["material_ids"], dtype=np.int64),
                np.asarray(d["constrained_nodes"], dtype=np.int64),
                np.asarray(d.get("constrained_dofs", []),
                           dtype=np.int64).reshape(-1, 2))
    return mesh, materials


def write_mesh(path, mesh, materials):
    Path(path).write_text(json.dumps(mesh_to_dict(mesh, materials)))


def read_mesh(path):
    try:
        return mesh_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid mesh file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# ROMX binary matrices
# ---------------------------------------------------------------------------

def write_romx(path, matrix):
    """Binary matrix: magic, version u32, rows u64, cols u64, then
    little-endian f64 column-major payload. Bit patterns round-trip."""
    a = np.asarray(matrix, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    with open(path, "wb") as fh:
        fh.write(ROMX_MAGIC)
        fh.write(struct.pack("<I", ROMX_VERSION))
        fh.write(struct.pack("<QQ", a.shape[0], a.shape[1]))
        fh.write(np.asfortranarray(a).tobytes(order="F"))


def read_romx(path):
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != ROMX_MAGIC:
        raise IntegrityError(f"{path}: not a ROMX file", path=str(path))
    version, = struct.unpack("<I", raw[4:8])
    if version != ROMX_VERSION:
        raise IntegrityError(f"{path}: unsupported ROMX version {version}",
                             path=str(path))
    rows, cols = struct.unpack("<QQ", raw[8:24])
    payload = raw[24:]
    if len(payload) != 8 * rows * cols:
        raise IntegrityError(f"{path}: truncated payload", path=str(path))
    return np.frombuffer(payload, dtype="<f8").reshape((rows, cols), order="F").copy()


def sha256_file(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_LOADING_KEYS = {
    "pressure": {"type", "face", "direction", "magnitude", "profile"},
    "initial_velocity": {"type", "velocity", "rigid_wall_penalty"},
}

_CONFIG_KEYS = {
    "version", "mode", "adaptive", "macro_mesh", "rve_mesh", "dt", "t0", "tf",
    "ds", "m_init", "n_train", "r_tol", "c_max", "epsilon", "energy_tol",
    "loading", "threads", "seed", "units", "instrument", "warm_start",
    "reference_history", "collect_stride",
}

_DEFAULTS = {
    "version": CONFIG_VERSION,
    "adaptive": True,
    "t0": 0.0,
    "m_init": 500,
    "n_train": 0,
    "r_tol": robdb.DEFAULT_R_TOL,
    "c_max": robdb.DEFAULT_C_MAX,
    "epsilon": hyperreduction.DEFAULT_EPSILON,
    "energy_tol": reduction.DEFAULT_ENERGY_TOL,
    "threads": 1,
    "seed": 0,
    "units": "si",
    "instrument": False,
    "warm_start": "previous",
}

# multiplicative CGS -> SI conversions per field role
_CGS = {"stress": 0.1, "length": 0.01, "density": 1000.0, "velocity": 0.01}


def validate_config(raw):
    """Validate and normalize a configuration dict; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(_DEFAULTS)
    cfg.update(raw)
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"config version {cfg['version']} not supported")
    for key in ("mode", "dt", "tf", "loading"):
        if key not in cfg:
            raise ConfigError(f"missing required config key: {key}")
    if cfg["mode"] not in ("hdm", "prom", "hprom"):
        raise ConfigError(f"mode: expected hdm, prom or hprom, got {cfg['mode']!r}")
    if cfg["warm_start"] not in ("previous", "extrapolated"):
        raise ConfigError("warm_start: expected 'previous' or 'extrapolated'")
    if not cfg["dt"] > 0:
        raise ConfigError("dt must be positive")
    if not cfg["tf"] > cfg["t0"]:
        raise ConfigError("tf must exceed t0")
    cfg.setdefault("ds", cfg["dt"])
    ratio = cfg["ds"] / cfg["dt"]
    if cfg["ds"] < cfg["dt"] or abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("ds must be an integer multiple of dt")
    load = cfg["loading"]
    if not isinstance(load, dict) or load.get("type") not in _LOADING_KEYS:
        raise ConfigError("loading.type must be 'pressure' or 'initial_velocity'")
    bad = set(load) - _LOADING_KEYS[load["type"]]
    if bad:
        raise ConfigError(f"unknown loading keys: {sorted(bad)}")
    if load["type"] == "pressure":
        for key in ("face", "direction", "magnitude"):
            if key not in load:
                raise ConfigError(f"missing loading.{key}")
        load.setdefault("profile", "constant")
        if load["profile"] not in ("constant", "linear_ramp"):
            raise ConfigError("loading.profile: 'constant' or 'linear_ramp'")
    else:
        if "velocity" not in load:
            raise ConfigError("missing loading.velocity")
    if cfg["units"] not in ("si", "cgs"):
        raise ConfigError("units: expected 'si' or 'cgs'")
    if cfg["units"] == "cgs":
        _convert_cgs(cfg)
        cfg["units"] = "si"
    if int(cfg["threads"]) != 1:
        logger.warning("threads=%s requested; this build runs the serial "
                       "reference path", cfg["threads"])
    return cfg


def _convert_cgs(cfg):
    # times are seconds in both systems; mesh files are converted where
    # they are generated
    load = cfg["loading"]
    if load["type"] == "pressure":
        old = load["magnitude"]
        load["magnitude"] = old * _CGS["stress"]
        logger.info("cgs: pressure %g dyn/cm^2 -> %g Pa", old, load["magnitude"])
    else:
        old = load["velocity"]
        load["velocity"] = [v * _CGS["velocity"] for v in old]
        logger.info("cgs: velocity %s cm/s -> %s m/s", old, load["velocity"])


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    return validate_config(raw)


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir, cfg, inputs):
    if cfg["mode"] == "hdm":
        mode = "hdm"
    else:
        mode = cfg["mode"] + ("-adaptive" if cfg.get("adaptive")
                              else "-nonadaptive")
    manifest = {
        "config_hash": config_hash(cfg),
        "mode": mode,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "output_dir": str(out_dir),
        "seed": cfg.get("seed", 0),
        "tool_version": TOOL_VERSION,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# time histories
# ---------------------------------------------------------------------------

def write_history_csv(path, history):
    """CSV rows (t, node_id, ux, uy, uz, vx, vy, vz) at every sample."""
    nt, n_nodes, _ = history.disp.shape
    with open(path, "w") as fh:
        fh.write("t,node_id,ux,uy,uz,vx,vy,vz\n")
        for k in range(nt):
            t = history.times[k]
            d = history.disp[k]
            v = history.vel[k]
            for node in range(n_nodes):
                fh.write(f"{t!r},{node},{d[node, 0]!r},{d[node, 1]!r},"
                         f"{d[node, 2]!r},{v[node, 0]!r},{v[node, 1]!r},"
                         f"{v[node, 2]!r}\n")


def read_history_csv(path):
    from .multiscale import TimeHistory
    times = []
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t,node_id,ux,uy,uz,vx,vy,vz":
            raise IntegrityError(f"{path}: unexpected history header",
                                 path=str(path))
        for line in fh:
            parts = line.split(",")
            rows.append((float(parts[0]), int(parts[1]),
                         *[float(x) for x in parts[2:8]]))
    if not rows:
        raise IntegrityError(f"{path}: empty history", path=str(path))
    n_nodes = max(r[1] for r in rows) + 1
    times = sorted({r[0] for r in rows})
    index = {t: i for i, t in enumerate(times)}
    disp = np.zeros((len(times), n_nodes, 3))
    vel = np.zeros((len(times), n_nodes, 3))
    for t, node, ux, uy, uz, vx, vy, vz in rows:
        k = index[t]
        disp[k, node] = (ux, uy, uz)
        vel[k, node] = (vx, vy, vz)
    return TimeHistory(times=np.array(times), disp=disp, vel=vel)


# ---------------------------------------------------------------------------
# database directory
# ---------------------------------------------------------------------------

def save_database(db, path):
    """Write the database layout db/entry_<k>/{rob,params,snapshots}.romx
    plus meta.json files carrying centroids, lineage and content hashes."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entry_ids = []
    for e in db.entries:
        edir = root / f"entry_{e.id}"
        edir.mkdir(exist_ok=True)
        write_romx(edir / "rob.romx", e.rob.V)
        write_romx(edir / "params.romx", e.N_z)
        write_romx(edir / "snapshots.romx", e.N_u)
        meta = {
            "id": e.id,
            "centroid": e.centroid.tolist(),
            "s": e.s,
            "m": e.m,
            "singular_values": e.rob.singular_values.tolist(),
            "parent": e.parent,
            "generation": e.generation,
            "hashes": {name: sha256_file(edir / f"{name}.romx")
                       for name in ("rob", "params", "snapshots")},
        }
        (edir / "meta.json").write_text(json.dumps(meta, indent=1))
        entry_ids.append(e.id)
    if db.training_snapshots is not None:
        write_romx(root / "training_snapshots.romx", db.training_snapshots)
    if db.reduced_mesh is not None:
        rm = db.reduced_mesh
        trained_on = (sha256_file(root / "training_snapshots.romx")
                      if db.training_snapshots is not None else None)
        (root / "reduced_mesh.json").write_text(json.dumps({
            "elements": rm.element_ids.tolist(),
            "weights": rm.weights.tolist(),
            "epsilon": rm.epsilon,
            "trained_on": trained_on,
        }))
    (root / "meta.json").write_text(json.dumps({
        "entries": entry_ids,
        "r_tol": db.r_tol,
        "c_max": db.c_max,
        "energy_tol": db.energy_tol,
        "total_samples": db.total_samples,
        "next_id": db.next_id,
        "stats": db.stats.to_dict(),
    }, indent=1))


def _check_entry_hashes(edir, meta):
    for name, expected in meta["hashes"].items():
        actual = sha256_file(edir / f"{name}.romx")
        if actual != expected:
            raise IntegrityError(
                f"{edir / (name + '.romx')}: content hash mismatch",
                path=str(edir / (name + ".romx")))


def load_database(path, verify=True):
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise IntegrityError(f"{root}: not a database directory",
                             path=str(root)) from exc
    db = robdb.Database(entries=[], r_tol=meta["r_tol"], c_max=meta["c_max"],
                        energy_tol=meta["energy_tol"],
                        total_samples=meta["total_samples"],
                        next_id=meta["next_id"])
    db.stats = robdb.DbStats(**meta["stats"])
    for eid in meta["entries"]:
        edir = root / f"entry_{eid}"
        emeta = json.loads((edir / "meta.json").read_text())
        if verify:
            _check_entry_hashes(edir, emeta)
        N_z = read_romx(edir / "params.romx")
        N_u = read_romx(edir / "snapshots.romx")
        V = read_romx(edir / "rob.romx")
        fact = reduction.svd_from_matrix(N_u)
        rob = reduction.Rob(V=V, singular_values=np.asarray(
            emeta["singular_values"]))
        entry = robdb.LocalBasisEntry(eid, N_z, N_u, fact, rob,
                                      parent=emeta["parent"],
                                      generation=emeta["generation"])
        db.entries.append(entry)
    rm_path = root / "reduced_mesh.json"
    if rm_path.exists():
        rm = json.loads(rm_path.read_text())
        db.reduced_mesh = hyperreduction.ReducedMesh(
            element_ids=np.asarray(rm["elements"], dtype=np.int64),
            weights=np.asarray(rm["weights"]), epsilon=rm["epsilon"])
        if verify and rm.get("trained_on"):
            actual = sha256_file(root / "training_snapshots.romx")
            if actual != rm["trained_on"]:
                raise IntegrityError(
                    f"{root / 'training_snapshots.romx'}: content hash mismatch",
                    path=str(root / "training_snapshots.romx"))
            db.training_snapshots = read_romx(root / "training_snapshots.romx")
    return db


def inspect_database(path):
    """Integrity-checked report of a database directory."""
    db = load_database(path, verify=True)
    rows = []
    for e in db.entries:
        rows.append({
            "id": e.id,
            "m": e.m,
            "s": e.s,
            "generation": e.generation,
            "lineage": "root" if e.parent is None else f"parent={e.parent}",
            "centroid_norm": float(np.linalg.norm(e.centroid)),
        })
    report = {
        "entries": rows,
        "total_samples": db.total_samples,
        "sample_conservation": sum(e.m for e in db.entries) == db.total_samples,
        "capacity_ok": all(e.s <= db.c_max for e in db.entries),
        "stats": db.stats.to_dict(),
    }
    if db.reduced_mesh is not None:
        report["reduced_mesh_elements"] = int(db.reduced_mesh.n_sampled)
    return report
