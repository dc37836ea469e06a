"""Compiled inner loops: hex8 element evaluation, assembly, and micro Newton solvers.

Everything here is numba-compiled and operates on plain ndarrays unpacked from
the mesh (see fe_core.MeshArrays). Status codes instead of exceptions so batch
loops survive individual failures:

    OK = 0, INVERTED = 1 (det F <= 0 at a Gauss point),
    MAXITER = 2, BADSOLVE = 3 (non-finite Newton update).

All solvers count element force / tangent evaluations and return them so the
callers can maintain exact work counters.
"""

import numpy as np
from numba import njit

OK = 0
INVERTED = 1
MAXITER = 2
BADSOLVE = 3

# Gauss abscissa for 2x2x2 quadrature on [-1, 1]^3, weights are all 1.
_GP = 1.0 / np.sqrt(3.0)


@njit(cache=True)
def shape_gradients(coords):
    """Reference shape-function gradients and weighted Jacobians for one hex8.

    coords : (8, 3) node coordinates, bottom face counterclockwise then top.
    Returns (grad (8, 8, 3), wdet (8,), status): grad[g, a, J] = dN_a/dX_J at
    Gauss point g, wdet[g] = w_g * det(J_g). status = INVERTED if any
    det(J) <= 0.
    """
    grad = np.zeros((8, 8, 3))
    wdet = np.zeros(8)
    status = OK
    g = 0
    for kz in range(2):
        zeta = -_GP if kz == 0 else _GP
        for ky in range(2):
            eta = -_GP if ky == 0 else _GP
            for kx in range(2):
                xi = -_GP if kx == 0 else _GP
                # local gradients dN/dxi for the standard node ordering
                dn = np.empty((8, 3))
                sx = (-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0)
                sy = (-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0)
                sz = (-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0)
                for a in range(8):
                    dn[a, 0] = 0.125 * sx[a] * (1.0 + sy[a] * eta) * (1.0 + sz[a] * zeta)
                    dn[a, 1] = 0.125 * sy[a] * (1.0 + sx[a] * xi) * (1.0 + sz[a] * zeta)
                    dn[a, 2] = 0.125 * sz[a] * (1.0 + sx[a] * xi) * (1.0 + sy[a] * eta)
                # Jacobian J[i, j] = d x_j / d xi_i
                J = np.zeros((3, 3))
                for a in range(8):
                    for i in range(3):
                        for j in range(3):
                            J[i, j] += dn[a, i] * coords[a, j]
                det = (
                    J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
                    - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
                    + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
                )
                if det <= 0.0:
                    status = INVERTED
                    det = 1.0
                inv = np.empty((3, 3))
                inv[0, 0] = (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]) / det
                inv[0, 1] = (J[0, 2] * J[2, 1] - J[0, 1] * J[2, 2]) / det
                inv[0, 2] = (J[0, 1] * J[1, 2] - J[0, 2] * J[1, 1]) / det
                inv[1, 0] = (J[1, 2] * J[2, 0] - J[1, 0] * J[2, 2]) / det
                inv[1, 1] = (J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]) / det
                inv[1, 2] = (J[0, 2] * J[1, 0] - J[0, 0] * J[1, 2]) / det
                inv[2, 0] = (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]) / det
                inv[2, 1] = (J[0, 1] * J[2, 0] - J[0, 0] * J[2, 1]) / det
                inv[2, 2] = (J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]) / det
                # dN/dX = J^{-1} dN/dxi
                for a in range(8):
                    for jx in range(3):
                        s = 0.0
                        for i in range(3):
                            s += inv[jx, i] * dn[a, i]
                        grad[g, a, jx] = s
                wdet[g] = det
                g += 1
    return grad, wdet, status


@njit(cache=True)
def geometric_stiffness(grad, wdet, mu):
    """Deformation-independent tangent part mu * sum_g w (G G^T kron I3)."""
    kmu = np.zeros((24, 24))
    for g in range(8):
        w = mu * wdet[g]
        for a in range(8):
            for b in range(8):
                s = 0.0
                for J in range(3):
                    s += grad[g, a, J] * grad[g, b, J]
                s *= w
                for i in range(3):
                    kmu[3 * a + i, 3 * b + i] += s
    return kmu


@njit(cache=True, inline="always")
def _def_gradient(grad_g, d, F):
    """F = I + d^T grad at one Gauss point; returns det F."""
    for i in range(3):
        for J in range(3):
            s = 1.0 if i == J else 0.0
            for a in range(8):
                s += d[a, i] * grad_g[a, J]
            F[i, J] = s
    return (
        F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
        - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
        + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0])
    )


@njit(cache=True, inline="always")
def _inv3(F, det, Finv):
    Finv[0, 0] = (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1]) / det
    Finv[0, 1] = (F[0, 2] * F[2, 1] - F[0, 1] * F[2, 2]) / det
    Finv[0, 2] = (F[0, 1] * F[1, 2] - F[0, 2] * F[1, 1]) / det
    Finv[1, 0] = (F[1, 2] * F[2, 0] - F[1, 0] * F[2, 2]) / det
    Finv[1, 1] = (F[0, 0] * F[2, 2] - F[0, 2] * F[2, 0]) / det
    Finv[1, 2] = (F[0, 2] * F[1, 0] - F[0, 0] * F[1, 2]) / det
    Finv[2, 0] = (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]) / det
    Finv[2, 1] = (F[0, 1] * F[2, 0] - F[0, 0] * F[2, 1]) / det
    Finv[2, 2] = (F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]) / det


@njit(cache=True)
def element_force(grad, wdet, d, mu, lam, fe):
    """Internal force of one hex8, d = (8, 3) nodal displacements.

    fe (24,) is overwritten, node-major layout (3a + i). Returns status.
    """
    for p in range(24):
        fe[p] = 0.0
    F = np.empty((3, 3))
    Finv = np.empty((3, 3))
    for g in range(8):
        det = _def_gradient(grad[g], d, F)
        if det <= 0.0:
            return INVERTED
        _inv3(F, det, Finv)
        lnj = np.log(det)
        w = wdet[g]
        # P = mu (F - F^{-T}) + lam ln J F^{-T}; F^{-T}[i, J] = Finv[J, i]
        c = lam * lnj - mu
        for i in range(3):
            for J in range(3):
                pij = w * (mu * F[i, J] + c * Finv[J, i])
                for a in range(8):
                    fe[3 * a + i] += pij * grad[g, a, J]
    return OK


@njit(cache=True)
def element_force_tangent(grad, wdet, kmu, d, mu, lam, fe, ke):
    """Internal force and consistent tangent of one hex8.

    kmu is the precomputed geometric part from geometric_stiffness. fe (24,)
    and ke (24, 24) are overwritten. Returns status.
    """
    for p in range(24):
        fe[p] = 0.0
        for q in range(24):
            ke[p, q] = kmu[p, q]
    F = np.empty((3, 3))
    Finv = np.empty((3, 3))
    H = np.empty((8, 3))
    for g in range(8):
        det = _def_gradient(grad[g], d, F)
        if det <= 0.0:
            return INVERTED
        _inv3(F, det, Finv)
        lnj = np.log(det)
        w = wdet[g]
        c = lam * lnj - mu
        for i in range(3):
            for J in range(3):
                pij = w * (mu * F[i, J] + c * Finv[J, i])
                for a in range(8):
                    fe[3 * a + i] += pij * grad[g, a, J]
        # H[a, i] = sum_J grad[a, J] Finv[J, i]
        for a in range(8):
            for i in range(3):
                s = 0.0
                for J in range(3):
                    s += grad[g, a, J] * Finv[J, i]
                H[a, i] = s
        wb = w * (mu - lam * lnj)
        wl = w * lam
        # dP/dF contracted with both gradients: per node pair (a, b) the
        # 3x3 block is wb * outer(h_b, h_a) + wl * outer(h_a, h_b);
        # upper block triangle only, diagonal blocks are symmetric
        for a in range(8):
            ha0 = H[a, 0]
            ha1 = H[a, 1]
            ha2 = H[a, 2]
            ba0 = wb * ha0
            ba1 = wb * ha1
            ba2 = wb * ha2
            la0 = wl * ha0
            la1 = wl * ha1
            la2 = wl * ha2
            p0 = 3 * a
            hb0 = ha0
            hb1 = ha1
            hb2 = ha2
            ke[p0, p0] += hb0 * (ba0 + la0)
            ke[p0, p0 + 1] += ba1 * hb0 + la0 * hb1
            ke[p0, p0 + 2] += ba2 * hb0 + la0 * hb2
            ke[p0 + 1, p0 + 1] += hb1 * (ba1 + la1)
            ke[p0 + 1, p0 + 2] += ba2 * hb1 + la1 * hb2
            ke[p0 + 2, p0 + 2] += hb2 * (ba2 + la2)
            for b in range(a + 1, 8):
                hb0 = H[b, 0]
                hb1 = H[b, 1]
                hb2 = H[b, 2]
                q0 = 3 * b
                ke[p0, q0] += ba0 * hb0 + la0 * hb0
                ke[p0, q0 + 1] += ba1 * hb0 + la0 * hb1
                ke[p0, q0 + 2] += ba2 * hb0 + la0 * hb2
                ke[p0 + 1, q0] += ba0 * hb1 + la1 * hb0
                ke[p0 + 1, q0 + 1] += ba1 * hb1 + la1 * hb1
                ke[p0 + 1, q0 + 2] += ba2 * hb1 + la1 * hb2
                ke[p0 + 2, q0] += ba0 * hb2 + la2 * hb0
                ke[p0 + 2, q0 + 1] += ba1 * hb2 + la2 * hb1
                ke[p0 + 2, q0 + 2] += ba2 * hb2 + la2 * hb2
    for p in range(24):
        for q in range(p):
            ke[p, q] = ke[q, p]
    return OK


@njit(cache=True)
def build_ubar(u, F, node_coords, dof_kind, dof_pos):
    """Full displacement vector from unconstrained u and localized boundary data.

    Constrained dof (node n, dir i) gets sum_J (F - I)[i, J] X[n, J].
    """
    n = node_coords.shape[0]
    ubar = np.empty(3 * n)
    for node in range(n):
        for i in range(3):
            fd = 3 * node + i
            if dof_kind[fd] == 0:
                ubar[fd] = u[dof_pos[fd]]
            else:
                s = 0.0
                for J in range(3):
                    fij = F[i, J] - (1.0 if i == J else 0.0)
                    s += fij * node_coords[node, J]
                ubar[fd] = s
    return ubar


@njit(cache=True)
def assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e, dof_kind, dof_pos,
                   f_u, f_c):
    """Assembled internal force split into unconstrained / constrained parts.

    Element loop order fixes the floating-point summation order. Returns
    (status, element id of first failure or -1).
    """
    ne = grad.shape[0]
    f_u[:] = 0.0
    f_c[:] = 0.0
    d = np.empty((8, 3))
    fe = np.empty(24)
    for e in range(ne):
        for a in range(8):
            for i in range(3):
                d[a, i] = ubar[elem_dofs[e, 3 * a + i]]
        st = element_force(grad[e], wdet[e], d, mu_e[e], lam_e[e], fe)
        if st != OK:
            return st, e
        for p in range(24):
            fd = elem_dofs[e, p]
            if dof_kind[fd] == 0:
                f_u[dof_pos[fd]] += fe[p]
            else:
                f_c[dof_pos[fd]] += fe[p]
    return OK, -1


@njit(cache=True)
def assemble_force_tangent(ubar, grad, wdet, kmu, elem_dofs, mu_e, lam_e,
                           dof_kind, dof_pos, f_u, f_c, K):
    """Force plus dense tangent on the unconstrained block. Returns (status, elem)."""
    ne = grad.shape[0]
    f_u[:] = 0.0
    f_c[:] = 0.0
    K[:, :] = 0.0
    d = np.empty((8, 3))
    fe = np.empty(24)
    ke = np.empty((24, 24))
    rows = np.empty(24, dtype=np.int64)
    for e in range(ne):
        for a in range(8):
            for i in range(3):
                d[a, i] = ubar[elem_dofs[e, 3 * a + i]]
        st = element_force_tangent(grad[e], wdet[e], kmu[e], d, mu_e[e], lam_e[e],
                                   fe, ke)
        if st != OK:
            return st, e
        for p in range(24):
            fd = elem_dofs[e, p]
            if dof_kind[fd] == 0:
                rows[p] = dof_pos[fd]
                f_u[dof_pos[fd]] += fe[p]
            else:
                rows[p] = -1
                f_c[dof_pos[fd]] += fe[p]
        for p in range(24):
            rp = rows[p]
            if rp < 0:
                continue
            for q in range(24):
                rq = rows[q]
                if rq >= 0:
                    K[rp, rq] += ke[p, q]
    return OK, -1


@njit(cache=True, inline="always")
def _homogenize(f_c, xc, inv_vol, P):
    """P[i, J] = (1 / |B|) sum_m R[m, i] X[m, J], f_c interleaved per node."""
    for i in range(3):
        for J in range(3):
            P[i, J] = 0.0
    nc = xc.shape[0]
    for m in range(nc):
        for i in range(3):
            r = f_c[3 * m + i]
            for J in range(3):
                P[i, J] += r * xc[m, J]
    for i in range(3):
        for J in range(3):
            P[i, J] *= inv_vol


@njit(cache=True)
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return np.sqrt(s)


@njit(cache=True)
def _solve_spd(K, b):
    """Cholesky solve with LU fallback; the Newton tangent is SPD in the
    working strain regime and dpotrf plus substitution beats the general
    LU here."""
    try:
        L = np.linalg.cholesky(K)
    except Exception:
        return np.linalg.solve(K, b)
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= L[i, j] * y[j]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for j in range(i + 1, n):
            s -= L[j, i] * x[j]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def residual_and_stress(u, F, node_coords, grad, wdet, elem_dofs, mu_e, lam_e,
                        dof_kind, dof_pos, xc, inv_vol, n_u, n_c):
    """One full-mesh force pass: residual norm, reactions, homogenized stress.

    Returns (status, ||f_u||, P (3,3), f_c).
    """
    ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
    f_u = np.empty(n_u)
    f_c = np.empty(n_c)
    P = np.empty((3, 3))
    st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                           dof_kind, dof_pos, f_u, f_c)
    if st != OK:
        return st, np.inf, P, f_c
    _homogenize(f_c, xc, inv_vol, P)
    return OK, _norm(f_u), P, f_c


@njit(cache=True)
def hdm_solve(F, u0, node_coords, grad, wdet, kmu, elem_dofs, mu_e, lam_e,
              dof_kind, dof_pos, xc, inv_vol, n_u, n_c,
              tol_rel, tol_abs_fac, res_floor, max_iter):
    """Full Newton on the high-dimensional micro equilibrium.

    Plain warm start from u0, exact tangent at every iteration. Returns
    (u, iters, status, den, res, P, f_c, n_force_passes, n_tang_passes).
    """
    zero = np.zeros(n_u)
    f_u = np.empty(n_u)
    f_c = np.empty(n_c)
    P = np.zeros((3, 3))
    K = np.empty((n_u, n_u))

    ubar0 = build_ubar(zero, F, node_coords, dof_kind, dof_pos)
    st, _ = assemble_force(ubar0, grad, wdet, elem_dofs, mu_e, lam_e,
                           dof_kind, dof_pos, f_u, f_c)
    nf = 1
    if st != OK:
        return zero, 0, st, 0.0, np.inf, P, f_c, nf, 0
    den = _norm(f_u)
    tol = tol_rel * den + tol_abs_fac * den + res_floor

    u = u0.copy()
    ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
    st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                           dof_kind, dof_pos, f_u, f_c)
    nf += 1
    if st != OK:
        # fall back to the reference state; one more chance below
        u[:] = 0.0
        ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
        st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                               dof_kind, dof_pos, f_u, f_c)
        nf += 1
        if st != OK:
            return u, 0, st, den, np.inf, P, f_c, nf, 0
    res = _norm(f_u)
    it = 0
    nt = 0
    while res > tol:
        if it >= max_iter:
            _homogenize(f_c, xc, inv_vol, P)
            return u, it, MAXITER, den, res, P, f_c, nf, nt
        st, _ = assemble_force_tangent(ubar, grad, wdet, kmu, elem_dofs, mu_e,
                                       lam_e, dof_kind, dof_pos, f_u, f_c, K)
        nt += 1
        if st != OK:
            return u, it, st, den, res, P, f_c, nf, nt
        du = _solve_spd(K, f_u)
        ok = True
        for i in range(n_u):
            if not np.isfinite(du[i]):
                ok = False
        if not ok:
            return u, it, BADSOLVE, den, res, P, f_c, nf, nt
        for i in range(n_u):
            u[i] -= du[i]
        ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
        st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                               dof_kind, dof_pos, f_u, f_c)
        nf += 1
        if st != OK:
            return u, it, st, den, res, P, f_c, nf, nt
        res = _norm(f_u)
        it += 1
    _homogenize(f_c, xc, inv_vol, P)
    return u, it, OK, den, res, P, f_c, nf, nt


@njit(cache=True)
def hdm_solve_batch(F_batch, U0, node_coords, grad, wdet, kmu, elem_dofs, mu_e,
                    lam_e, dof_kind, dof_pos, xc, inv_vol, n_u, n_c,
                    tol_rel, tol_abs_fac, res_floor, max_iter, extrapolate,
                    U_prev2, U_out, P_out, iters, status, counters):
    """Solve a batch of micro problems with the full model.

    U0 holds the warm starts (previous converged states); when extrapolate is
    nonzero, the start is 2 u_prev - u_prev2 with a plain retry on failure.
    counters (3,): force passes, tangent passes, element force/tangent count
    is passes * n_elements on the caller side.
    """
    nq = F_batch.shape[0]
    for q in range(nq):
        fnorm = 0.0
        for i in range(3):
            for j in range(3):
                d = F_batch[q, i, j] - (1.0 if i == j else 0.0)
                fnorm += d * d
        if fnorm == 0.0:
            # stress-free reference: exact trivial solution, no work
            U_out[q, :] = 0.0
            P_out[q, :, :] = 0.0
            iters[q] = 0
            status[q] = OK
            continue
        if extrapolate != 0:
            ug = 2.0 * U0[q] - U_prev2[q]
        else:
            ug = U0[q].copy()
        u, it, st, den, res, P, f_c, nf, nt = hdm_solve(
            F_batch[q], ug, node_coords, grad, wdet, kmu, elem_dofs, mu_e,
            lam_e, dof_kind, dof_pos, xc, inv_vol, n_u, n_c,
            tol_rel, tol_abs_fac, res_floor, max_iter)
        counters[0] += nf
        counters[1] += nt
        if st != OK and extrapolate != 0:
            u, it, st, den, res, P, f_c, nf, nt = hdm_solve(
                F_batch[q], U0[q].copy(), node_coords, grad, wdet, kmu,
                elem_dofs, mu_e, lam_e, dof_kind, dof_pos, xc, inv_vol,
                n_u, n_c, tol_rel, tol_abs_fac, res_floor, max_iter)
            counters[0] += nf
            counters[1] += nt
        U_out[q] = u
        P_out[q] = P
        iters[q] = it
        status[q] = st


@njit(cache=True)
def reduced_solve_full(F, V, y0, node_coords, grad, wdet, kmu, elem_dofs, mu_e,
                       lam_e, dof_kind, dof_pos, xc, inv_vol, n_u, n_c,
                       tol_rel, tol_abs_fac, res_floor, max_iter):
    """Galerkin-projected Newton with lazily refreshed reduced tangent.

    Full-mesh assemblies projected onto V. The reduced tangent V^T K V is
    built once per solve and refreshed only when the residual stops
    contracting. Returns (y, iters, status, den_full, num_full, r_red, P,
    f_c, n_force_passes, n_tang_passes). den_full / num_full are the
    full-mesh norms needed by the residual indicator; the last force pass
    already provides the reactions, so acceptance costs no extra assembly.
    """
    s = V.shape[1]
    zero = np.zeros(n_u)
    f_u = np.empty(n_u)
    f_c = np.empty(n_c)
    P = np.zeros((3, 3))
    K = np.empty((n_u, n_u))
    Kr = np.empty((s, s))

    ubar0 = build_ubar(zero, F, node_coords, dof_kind, dof_pos)
    st, _ = assemble_force(ubar0, grad, wdet, elem_dofs, mu_e, lam_e,
                           dof_kind, dof_pos, f_u, f_c)
    nf = 1
    if st != OK:
        return y0, 0, st, 0.0, np.inf, np.inf, P, f_c, nf, 0
    den_full = _norm(f_u)
    gden = _norm(V.T @ f_u)
    tol = tol_rel * gden + tol_abs_fac * gden + res_floor

    y = y0.copy()
    u = V @ y
    ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
    st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                           dof_kind, dof_pos, f_u, f_c)
    nf += 1
    if st != OK:
        y[:] = 0.0
        u = V @ y
        ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
        st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                               dof_kind, dof_pos, f_u, f_c)
        nf += 1
        if st != OK:
            return y, 0, st, den_full, np.inf, np.inf, P, f_c, nf, 0
    g = V.T @ f_u
    res = _norm(g)
    it = 0
    nt = 0
    fresh = False
    while res > tol:
        if it >= max_iter:
            _homogenize(f_c, xc, inv_vol, P)
            return y, it, MAXITER, den_full, _norm(f_u), res, P, f_c, nf, nt
        if not fresh:
            st, _ = assemble_force_tangent(ubar, grad, wdet, kmu, elem_dofs,
                                           mu_e, lam_e, dof_kind, dof_pos,
                                           f_u, f_c, K)
            nt += 1
            if st != OK:
                return y, it, st, den_full, np.inf, res, P, f_c, nf, nt
            Kr = V.T @ (K @ V)
            fresh = True
        dy = np.linalg.solve(Kr, g)
        ok = True
        for i in range(s):
            if not np.isfinite(dy[i]):
                ok = False
        if not ok:
            return y, it, BADSOLVE, den_full, np.inf, res, P, f_c, nf, nt
        for i in range(s):
            y[i] -= dy[i]
        u = V @ y
        ubar = build_ubar(u, F, node_coords, dof_kind, dof_pos)
        st, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                               dof_kind, dof_pos, f_u, f_c)
        nf += 1
        if st != OK:
            return y, it, st, den_full, np.inf, res, P, f_c, nf, nt
        g = V.T @ f_u
        res_new = _norm(g)
        if res_new > 0.25 * res:
            fresh = False  # frozen tangent stalled; rebuild next pass
        res = res_new
        it += 1
    _homogenize(f_c, xc, inv_vol, P)
    return y, it, OK, den_full, _norm(f_u), res, P, f_c, nf, nt


@njit(cache=True)
def hyper_force(y, ubar_c, V_el, sub_elems, weights, grad, wdet, elem_dofs,
                mu_e, lam_e, f_r):
    """Weighted reduced force on the sampled element set only.

    ubar_c is the boundary-only displacement field (u = 0), V_el the per
    sampled element basis slice (m, 24, s) with zero rows on constrained
    dofs. Returns status.
    """
    m = sub_elems.shape[0]
    su = V_el.shape[2]
    for i in range(su):
        f_r[i] = 0.0
    d = np.empty((8, 3))
    fe = np.empty(24)
    for j in range(m):
        e = sub_elems[j]
        for a in range(8):
            for i in range(3):
                p = 3 * a + i
                s = ubar_c[elem_dofs[e, p]]
                for k in range(su):
                    s += V_el[j, p, k] * y[k]
                d[a, i] = s
        st = element_force(grad[e], wdet[e], d, mu_e[e], lam_e[e], fe)
        if st != OK:
            return st
        w = weights[j]
        for k in range(su):
            s = 0.0
            for p in range(24):
                s += V_el[j, p, k] * fe[p]
            f_r[k] += w * s
    return OK


@njit(cache=True)
def hyper_force_tangent(y, ubar_c, V_el, sub_elems, weights, grad, wdet, kmu,
                        elem_dofs, mu_e, lam_e, f_r, K_r):
    """Weighted reduced force and tangent on the sampled element set."""
    m = sub_elems.shape[0]
    su = V_el.shape[2]
    for i in range(su):
        f_r[i] = 0.0
        for j in range(su):
            K_r[i, j] = 0.0
    d = np.empty((8, 3))
    fe = np.empty(24)
    ke = np.empty((24, 24))
    for j in range(m):
        e = sub_elems[j]
        for a in range(8):
            for i in range(3):
                p = 3 * a + i
                s = ubar_c[elem_dofs[e, p]]
                for k in range(su):
                    s += V_el[j, p, k] * y[k]
                d[a, i] = s
        st = element_force_tangent(grad[e], wdet[e], kmu[e], d, mu_e[e],
                                   lam_e[e], fe, ke)
        if st != OK:
            return st
        w = weights[j]
        tmp = ke @ V_el[j]
        for k in range(su):
            s = 0.0
            for p in range(24):
                s += V_el[j, p, k] * fe[p]
            f_r[k] += w * s
            for l in range(su):
                s2 = 0.0
                for p in range(24):
                    s2 += V_el[j, p, k] * tmp[p, l]
                K_r[k, l] += w * s2
    return OK


@njit(cache=True)
def hprom_solve(F, V, V_el, sub_elems, weights, y0, node_coords, grad, wdet,
                kmu, elem_dofs, mu_e, lam_e, dof_kind, dof_pos, n_u,
                tol_rel, tol_abs_fac, res_floor, max_iter):
    """Hyperreduced Newton: per-iteration cost proportional to the sampled set.

    The convergence denominator is the projected full force at zero state,
    supplied by the caller through tol arguments? No: computed here from one
    hyperreduced pass at y = 0 to keep the solver self-contained and cheap.
    Returns (y, iters, status, n_hyper_force_passes, n_hyper_tang_passes).
    """
    s = V.shape[1]
    f_r = np.empty(s)
    K_r = np.empty((s, s))
    zero = np.zeros(n_u)
    ubar_c = build_ubar(zero, F, node_coords, dof_kind, dof_pos)

    y = np.zeros(s)
    st = hyper_force(y, ubar_c, V_el, sub_elems, weights, grad, wdet,
                     elem_dofs, mu_e, lam_e, f_r)
    nf = 1
    if st != OK:
        return y, 0, st, nf, 0
    gden = _norm(f_r)
    tol = tol_rel * gden + tol_abs_fac * gden + res_floor

    y = y0.copy()
    st = hyper_force(y, ubar_c, V_el, sub_elems, weights, grad, wdet,
                     elem_dofs, mu_e, lam_e, f_r)
    nf += 1
    if st != OK:
        y[:] = 0.0
        st = hyper_force(y, ubar_c, V_el, sub_elems, weights, grad, wdet,
                         elem_dofs, mu_e, lam_e, f_r)
        nf += 1
        if st != OK:
            return y, 0, st, nf, 0
    res = _norm(f_r)
    it = 0
    nt = 0
    fresh = False
    while res > tol:
        if it >= max_iter:
            return y, it, MAXITER, nf, nt
        if not fresh:
            st = hyper_force_tangent(y, ubar_c, V_el, sub_elems, weights, grad,
                                     wdet, kmu, elem_dofs, mu_e, lam_e, f_r, K_r)
            nt += 1
            if st != OK:
                return y, it, st, nf, nt
            fresh = True
        dy = np.linalg.solve(K_r, f_r)
        ok = True
        for i in range(s):
            if not np.isfinite(dy[i]):
                ok = False
        if not ok:
            return y, it, BADSOLVE, nf, nt
        for i in range(s):
            y[i] -= dy[i]
        st = hyper_force(y, ubar_c, V_el, sub_elems, weights, grad, wdet,
                         elem_dofs, mu_e, lam_e, f_r)
        nf += 1
        if st != OK:
            return y, it, st, nf, nt
        res_new = _norm(f_r)
        if res_new > 0.25 * res:
            fresh = False
        res = res_new
        it += 1
    return y, it, OK, nf, nt


@njit(cache=True)
def prom_query_batch(F_batch, U_warm, V, node_coords, grad, wdet, kmu,
                     elem_dofs, mu_e, lam_e, dof_kind, dof_pos, xc, inv_vol,
                     n_u, n_c, tol_rel, tol_abs_fac, res_floor, max_iter,
                     extrapolate, U_warm2, Y_out, U_out, r_out, P_out, iters,
                     status, nf_out, nt_out):
    """Galerkin queries for a batch sharing one basis.

    Residual indicator comes free: the projected solver already evaluates
    the full force at the converged state and at the zero state.
    Trivial queries (F = I exactly) are answered without any element work.
    """
    nq = F_batch.shape[0]
    s = V.shape[1]
    for q in range(nq):
        fnorm = 0.0
        for i in range(3):
            for j in range(3):
                d = F_batch[q, i, j] - (1.0 if i == j else 0.0)
                fnorm += d * d
        if fnorm == 0.0:
            Y_out[q, :] = 0.0
            U_out[q, :] = 0.0
            P_out[q, :, :] = 0.0
            r_out[q] = 0.0
            iters[q] = 0
            status[q] = OK
            nf_out[q] = 0
            nt_out[q] = 0
            continue
        if extrapolate != 0:
            ug = 2.0 * U_warm[q] - U_warm2[q]
        else:
            ug = U_warm[q]
        y0 = V.T @ ug
        y, it, st, den, num, r_red, P, f_c, nf, nt = reduced_solve_full(
            F_batch[q], V, y0, node_coords, grad, wdet, kmu, elem_dofs, mu_e,
            lam_e, dof_kind, dof_pos, xc, inv_vol, n_u, n_c,
            tol_rel, tol_abs_fac, res_floor, max_iter)
        Y_out[q] = y
        U_out[q] = V @ y
        P_out[q] = P
        iters[q] = it
        status[q] = st
        nf_out[q] = nf
        nt_out[q] = nt
        if st == OK or st == MAXITER:
            r_out[q] = num / den if den > 0.0 else np.inf
        else:
            r_out[q] = np.inf


@njit(cache=True)
def hprom_query_batch(F_batch, U_warm, V, V_el, sub_elems, weights,
                      node_coords, grad, wdet, kmu, elem_dofs, mu_e, lam_e,
                      dof_kind, dof_pos, xc, inv_vol, n_u, n_c,
                      tol_rel, tol_abs_fac, res_floor, max_iter, extrapolate,
                      U_warm2, Y_out, U_out, r_out, P_out, iters, status,
                      nf_out, nt_out, full_passes):
    """Hyperreduced queries plus the full-mesh acceptance indicator.

    Per query: hyperreduced Newton (element work proportional to the
    sampled set), then one full force pass at the zero state and one at the
    converged state; the latter also yields the boundary reactions used for
    homogenization, so acceptance costs exactly two full passes.
    """
    nq = F_batch.shape[0]
    f_u = np.empty(n_u)
    f_c = np.empty(n_c)
    for q in range(nq):
        fnorm = 0.0
        for i in range(3):
            for j in range(3):
                d = F_batch[q, i, j] - (1.0 if i == j else 0.0)
                fnorm += d * d
        if fnorm == 0.0:
            Y_out[q, :] = 0.0
            U_out[q, :] = 0.0
            P_out[q, :, :] = 0.0
            r_out[q] = 0.0
            iters[q] = 0
            status[q] = OK
            nf_out[q] = 0
            nt_out[q] = 0
            continue
        if extrapolate != 0:
            ug = 2.0 * U_warm[q] - U_warm2[q]
        else:
            ug = U_warm[q]
        y0 = V.T @ ug
        y, it, st, nf, nt = hprom_solve(
            F_batch[q], V, V_el, sub_elems, weights, y0, node_coords, grad,
            wdet, kmu, elem_dofs, mu_e, lam_e, dof_kind, dof_pos, n_u,
            tol_rel, tol_abs_fac, res_floor, max_iter)
        Y_out[q] = y
        u = V @ y
        U_out[q] = u
        iters[q] = it
        status[q] = st
        nf_out[q] = nf
        nt_out[q] = nt
        if st != OK:
            r_out[q] = np.inf
            P_out[q, :, :] = 0.0
            continue
        # full-mesh acceptance: denominator at zero state, numerator and
        # reactions at the reduced solution
        ubar0 = build_ubar(np.zeros(n_u), F_batch[q], node_coords, dof_kind,
                           dof_pos)
        st0, _ = assemble_force(ubar0, grad, wdet, elem_dofs, mu_e, lam_e,
                                dof_kind, dof_pos, f_u, f_c)
        den = _norm(f_u)
        ubar = build_ubar(u, F_batch[q], node_coords, dof_kind, dof_pos)
        st1, _ = assemble_force(ubar, grad, wdet, elem_dofs, mu_e, lam_e,
                                dof_kind, dof_pos, f_u, f_c)
        full_passes[q] = 2
        if st0 != OK or st1 != OK or den == 0.0:
            r_out[q] = np.inf
            P_out[q, :, :] = 0.0
            continue
        r_out[q] = _norm(f_u) / den
        P = np.empty((3, 3))
        _homogenize(f_c, xc, inv_vol, P)
        P_out[q] = P


@njit(cache=True)
def ecsw_columns(Y, Ubar_c, V_el_all, grad, wdet, elem_dofs, mu_e, lam_e):
    """Per-element projected force contributions for ECSW training.

    Y (n_train, s) reduced training states, Ubar_c (n_train, 3n) boundary
    fields, V_el_all (ne, 24, s) basis slices for every element. Returns
    (G ((n_train*s, ne)), status, elem, state).
    """
    nt = Y.shape[0]
    s = Y.shape[1]
    ne = grad.shape[0]
    G = np.zeros((nt * s, ne))
    d = np.empty((8, 3))
    fe = np.empty(24)
    for t in range(nt):
        for e in range(ne):
            for a in range(8):
                for i in range(3):
                    p = 3 * a + i
                    val = Ubar_c[t, elem_dofs[e, p]]
                    for k in range(s):
                        val += V_el_all[e, p, k] * Y[t, k]
                    d[a, i] = val
            st = element_force(grad[e], wdet[e], d, mu_e[e], lam_e[e], fe)
            if st != OK:
                return G, st, e, t
            for k in range(s):
                acc = 0.0
                for p in range(24):
                    acc += V_el_all[e, p, k] * fe[p]
                G[t * s + k, e] = acc
    return G, OK, -1, -1


@njit(cache=True)
def lumped_mass_kernel(node_coords, elements, rho_e):
    """Row-sum lumped mass: node a gets rho * integral of N_a per element."""
    n = node_coords.shape[0]
    mass = np.zeros(3 * n)
    coords = np.empty((8, 3))
    for e in range(elements.shape[0]):
        for a in range(8):
            for j in range(3):
                coords[a, j] = node_coords[elements[e, a], j]
        grad, wdet, st = shape_gradients(coords)
        g = 0
        for kz in range(2):
            zeta = -_GP if kz == 0 else _GP
            for ky in range(2):
                eta = -_GP if ky == 0 else _GP
                for kx in range(2):
                    xi = -_GP if kx == 0 else _GP
                    sx = (-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0)
                    sy = (-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0)
                    sz = (-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0)
                    for a in range(8):
                        na = 0.125 * (1.0 + sx[a] * xi) * (1.0 + sy[a] * eta) \
                            * (1.0 + sz[a] * zeta)
                        m = rho_e[e] * wdet[g] * na
                        node = elements[e, a]
                        mass[3 * node] += m
                        mass[3 * node + 1] += m
                        mass[3 * node + 2] += m
                    g += 1
    return mass
