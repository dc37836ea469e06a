"""Structured hex mesh generators: boxes with face boundary conditions,
unit-cell RVEs with a centered void, and fiber-reinforced unit cells."""

import numpy as np

from .errors import ConfigError
from .fe_core import Material, Mesh

_FACE_AXES = {"xmin": (0, 0), "xmax": (0, 1), "ymin": (1, 0), "ymax": (1, 1),
              "zmin": (2, 0), "zmax": (2, 1)}


def _grid(nx, ny, nz, lx, ly, lz):
    """Structured grid nodes (x fastest) and hex8 connectivity."""
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    zs = np.linspace(0.0, lz, nz + 1)
    nodes = np.array([[x, y, z] for z in zs for y in ys for x in xs])

    def nid(i, j, k):
        return k * (ny + 1) * (nx + 1) + j * (nx + 1) + i

    elems = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                elems.append([nid(i, j, k), nid(i + 1, j, k),
                              nid(i + 1, j + 1, k), nid(i, j + 1, k),
                              nid(i, j, k + 1), nid(i + 1, j, k + 1),
                              nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1)])
    return nodes, np.array(elems, dtype=np.int64)


def _face_nodes(nodes, face, tol=1e-12):
    axis, end = _FACE_AXES[face]
    bound = nodes[:, axis].max() if end else nodes[:, axis].min()
    span = max(nodes[:, axis].max() - nodes[:, axis].min(), 1.0)
    return np.flatnonzero(np.abs(nodes[:, axis] - bound) <= tol * span)


def generate_box(nx, ny, nz, lx, ly, lz, material,
                 fixed_faces=(), symmetry_faces=()):
    """Box mesh with fully fixed faces and normal-constrained symmetry faces.

    Returns (Mesh, [Material]).
    """
    if min(nx, ny, nz) < 1 or min(lx, ly, lz) <= 0:
        raise ConfigError("box subdivisions must be >= 1 and lengths positive")
    nodes, elems = _grid(nx, ny, nz, lx, ly, lz)
    fixed = set()
    for face in fixed_faces:
        if face not in _FACE_AXES:
            raise ConfigError(f"unknown face name {face!r}")
        fixed.update(_face_nodes(nodes, face).tolist())
    extra = []
    for face in symmetry_faces:
        if face not in _FACE_AXES:
            raise ConfigError(f"unknown face name {face!r}")
        axis, _ = _FACE_AXES[face]
        for node in _face_nodes(nodes, face):
            if node not in fixed:
                extra.append((int(node), axis))
    mesh = Mesh(nodes, elems, np.zeros(len(elems), dtype=np.int64),
                sorted(fixed), extra)
    return mesh, [material]


def generate_rve_void(n, void, material, size=1.0):
    """Unit cell of n^3 elements with a centered void^3 block removed.

    Voids are represented by omitting elements; the porosity equals
    (void / n)^3. Uniform essential boundary conditions on the exterior
    boundary; nodes interior to the void are dropped. Returns
    (Mesh, [Material]).
    """
    if void >= n:
        raise ConfigError(f"void span {void} must be smaller than the cell {n}")
    if void < 0 or (void > 0 and (n - void) % 2 != 0):
        raise ConfigError("void must be nonnegative and centered: n - void even")
    nodes, elems = _grid(n, n, n, size, size, size)
    lo = (n - void) // 2
    hi = lo + void

    keep = []
    for e, conn in enumerate(elems):
        k, rem = divmod(e, n * n)
        j, i = divmod(rem, n)
        inside = lo <= i < hi and lo <= j < hi and lo <= k < hi
        if not inside:
            keep.append(e)
    elems = elems[keep]

    used = np.zeros(len(nodes), dtype=bool)
    used[elems.ravel()] = True
    renum = -np.ones(len(nodes), dtype=np.int64)
    renum[used] = np.arange(used.sum())
    nodes = nodes[used]
    elems = renum[elems]

    exterior = set()
    for face in _FACE_AXES:
        exterior.update(_face_nodes(nodes, face).tolist())
    mesh = Mesh(nodes, elems, np.zeros(len(elems), dtype=np.int64),
                sorted(exterior))
    return mesh, [material]


def generate_rve_fiber(n, fiber, fiber_material, matrix_material, size=1.0):
    """Unit cell with a square fiber prism of fiber x fiber elements running
    along the local x-axis through the center. Returns (Mesh, materials)
    with material id 0 = matrix, 1 = fiber."""
    if fiber >= n or fiber < 1:
        raise ConfigError(f"fiber span {fiber} must be in [1, {n})")
    if (n - fiber) % 2 != 0:
        raise ConfigError("fiber must be centered: n - fiber even")
    nodes, elems = _grid(n, n, n, size, size, size)
    lo = (n - fiber) // 2
    hi = lo + fiber
    mat = np.zeros(len(elems), dtype=np.int64)
    for e in range(len(elems)):
        k, rem = divmod(e, n * n)
        j, _ = divmod(rem, n)
        if lo <= j < hi and lo <= k < hi:
            mat[e] = 1
    exterior = set()
    for face in _FACE_AXES:
        exterior.update(_face_nodes(nodes, face).tolist())
    mesh = Mesh(nodes, elems, mat, sorted(exterior))
    return mesh, [matrix_material, fiber_material]


def generate_from_spec(spec):
    """Dispatch a geometry description dict to the matching generator."""
    kind = spec.get("kind")
    if kind in ("box", "bar"):
        mat = _material(spec.get("material"))
        return generate_box(spec["nx"], spec["ny"], spec["nz"],
                            spec["lx"], spec["ly"], spec["lz"], mat,
                            fixed_faces=spec.get("fixed_faces", ()),
                            symmetry_faces=spec.get("symmetry_faces", ()))
    if kind == "rve-void":
        mat = _material(spec.get("material"))
        return generate_rve_void(spec["n"], spec["void"], mat,
                                 size=spec.get("size", 1.0))
    if kind == "rve-fiber":
        return generate_rve_fiber(spec["n"], spec["fiber"],
                                  _material(spec.get("fiber_material")),
                                  _material(spec.get("matrix_material")),
                                  size=spec.get("size", 1.0))
    raise ConfigError(f"unknown geometry kind {kind!r}")


def _material(d):
    if not isinstance(d, dict) or "E" not in d or "nu" not in d:
        raise ConfigError("material requires E and nu")
    return Material(E=float(d["E"]), nu=float(d["nu"]),
                    rho=float(d["rho"]) if "rho" in d else None)
