"""Brute-force verifiers used by the tests and to mint reference values.

Everything here favours transparency over speed: explicit loops over cells
and quadrature points, dense matrices, exhaustive enumeration.
"""

from __future__ import annotations

import itertools

import numpy as np

from .elasticity import MaterialParams, degradation, ddot, elastic_stress, sym_grad
from .fespace import DofSystem, gauss_1d, transfer_to_quadrature
from .mesh import MeshError, QuadMesh
from .phasefield import VICoefficients

MAX_ENUMERATION = 16
MAX_DENSE_CELLS = 100


class OracleError(RuntimeError):
    """The brute-force check found no admissible or no unique answer."""


# ----------------------------------------------------------------------
# obstacle problem by enumeration
# ----------------------------------------------------------------------
def enumerate_vi(A, b, obstacle, tol=1e-12):
    """Solve ``min 1/2 x.Ax - b.x`` subject to ``x <= obstacle`` by trying
    every active set.

    Returns the KKT point.  Raises ``OracleError`` when none or several
    distinct ones exist.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    o = np.asarray(obstacle, dtype=float)
    n = len(b)
    if n > MAX_ENUMERATION:
        raise ValueError(f"enumeration limited to {MAX_ENUMERATION} unknowns, got {n}")
    finite = np.nonzero(np.abs(o) < 1e100)[0]
    scale_b = max(np.abs(b).max(initial=0.0), 1e-300)
    found = []
    # all subsets of one size are solved as a batch
    for k in range(len(finite) + 1):
        subsets = list(itertools.combinations(finite, k))
        combos = np.array(subsets, dtype=np.int64).reshape(len(subsets), k)
        act = np.zeros((len(combos), n), dtype=bool)
        np.put_along_axis(act, combos, True, axis=1)
        x = np.where(act, o, 0.0)
        if k < n:
            free = np.nonzero(~act)[1].reshape(len(combos), n - k)
            Aff = A[free[:, :, None], free[:, None, :]]
            rhs = b[free] - np.einsum("mij,mj->mi", A[free], np.where(act, o, 0.0))
            np.put_along_axis(x, free, np.linalg.solve(Aff, rhs[..., None])[..., 0], axis=1)
        lam = b - x @ A.T
        primal = np.all((x <= o + 1e-10 * np.maximum(np.abs(x).max(axis=1, keepdims=True), 1.0))
                        | act, axis=1)
        dual = np.all((lam >= -tol * scale_b) | ~act, axis=1)
        found.extend(x[primal & dual])
    if not found:
        raise OracleError("no KKT point found")
    ref = found[0]
    for x in found[1:]:
        if np.abs(x - ref).max() > 1e-9 * max(np.abs(ref).max(), 1.0):
            raise OracleError("several distinct KKT points")
    return ref


# ----------------------------------------------------------------------
# dense assembly
# ----------------------------------------------------------------------
def _shape(xi, eta):
    """Q1 values and reference gradients for corners (0,0),(1,0),(1,1),(0,1)."""
    N = [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
    dN = [(-(1 - eta), -(1 - xi)), (1 - eta, -xi), (eta, xi), (-eta, 1 - xi)]
    return N, dN


def constraint_matrix(mesh: QuadMesh):
    """Dense (vertices x masters) map found geometrically.

    A vertex is hanging when it sits strictly inside an edge of some leaf
    cell; it then takes the mean of that edge's endpoints, applied until
    only free vertices remain.  Returns ``(C, masters)``.
    """
    X = mesh.vertices
    nv = len(X)
    parent = {}
    for c in range(mesh.n_cells):
        x0, y0 = mesh.cell_origin[c]
        h = mesh.cell_h[c]
        corners = [(x0, y0), (x0 + h, y0), (x0 + h, y0 + h), (x0, y0 + h)]
        idx = [int(np.argmin(np.hypot(X[:, 0] - px, X[:, 1] - py))) for px, py in corners]
        for e0, e1 in ((0, 1), (1, 2), (3, 2), (0, 3)):
            p, q = X[idx[e0]], X[idx[e1]]
            for v in range(nv):
                if v in (idx[e0], idx[e1]):
                    continue
                d = X[v] - p
                t = d @ (q - p) / h ** 2
                off = abs(d[0] * (q - p)[1] - d[1] * (q - p)[0]) / h
                if 0 < t < 1 and off < 1e-12 * h:
                    if v not in parent or parent[v][2] < h:
                        parent[v] = (idx[e0], idx[e1], h)
    masters = np.array([v for v in range(nv) if v not in parent], dtype=np.int64)
    C = np.zeros((nv, len(masters)))
    col = {v: k for k, v in enumerate(masters)}

    def row(v):
        if v in col:
            r = np.zeros(len(masters))
            r[col[v]] = 1.0
            return r
        a, b, _ = parent[v]
        return 0.5 * (row(a) + row(b))

    for v in range(nv):
        C[v] = row(v)
    return C, masters


def _cell_corner_vertices(mesh, c):
    return [int(v) for v in mesh.cell_vertices[c]]


def _check_size(mesh):
    if mesh.n_cells > MAX_DENSE_CELLS:
        raise ValueError(f"dense oracle limited to {MAX_DENSE_CELLS} cells")


def _coefficient(value, mesh, c, xi, eta):
    if callable(value):
        x0, y0 = mesh.cell_origin[c]
        h = mesh.cell_h[c]
        return float(value(c, xi, eta, x0 + h * xi, y0 + h * eta))
    return float(value)


def dense_assembly(mesh: QuadMesh, reaction, diffusion, source=0.0, order=6):
    """Dense reaction-diffusion matrix and load vector on master vertices.

    ``reaction`` and ``source`` are numbers or callables
    ``f(cell, xi, eta, x, y)``.  Returns ``(A, b, masters)``.
    """
    _check_size(mesh)
    t, w = gauss_1d(order)
    nv = mesh.n_vertices
    A = np.zeros((nv, nv))
    b = np.zeros(nv)
    for c in range(mesh.n_cells):
        h = mesh.cell_h[c]
        verts = _cell_corner_vertices(mesh, c)
        for i in range(order):
            for j in range(order):
                xi, eta = t[i], t[j]
                wt = w[i] * w[j] * h * h
                N, dN = _shape(xi, eta)
                r = _coefficient(reaction, mesh, c, xi, eta)
                f = _coefficient(source, mesh, c, xi, eta)
                for a in range(4):
                    b[verts[a]] += wt * f * N[a]
                    for bb in range(4):
                        grad = (dN[a][0] * dN[bb][0] + dN[a][1] * dN[bb][1]) / (h * h)
                        A[verts[a], verts[bb]] += wt * (diffusion * grad + r * N[a] * N[bb])
    C, masters = constraint_matrix(mesh)
    return C.T @ A @ C, C.T @ b, masters


def reaction_callable(coeffs):
    """Adapter turning stored VI coefficients into ``f(cell, xi, eta, x, y)``."""
    def f(c, xi, eta, x, y):
        return coeffs.reaction_at(np.array([[xi, eta]]), np.array([c]))[0]
    return f


def dense_elasticity(mesh: QuadMesh, mat: MaterialParams, g=1.0, order=6):
    """Dense stiffness of ``int g sigma(u) : E(w)``, unknowns ``[u_x, u_y]``.

    Returns ``(K, masters)``.
    """
    _check_size(mesh)
    t, w = gauss_1d(order)
    nv = mesh.n_vertices
    K = np.zeros((2 * nv, 2 * nv))
    for c in range(mesh.n_cells):
        h = mesh.cell_h[c]
        verts = _cell_corner_vertices(mesh, c)
        for i in range(order):
            for j in range(order):
                xi, eta = t[i], t[j]
                wt = w[i] * w[j] * h * h
                _, dN = _shape(xi, eta)
                gv = _coefficient(g, mesh, c, xi, eta)
                for a in range(4):
                    for ca in range(2):
                        Ga = np.zeros((2, 2))
                        Ga[ca] = np.array(dN[a]) / h
                        Ea = sym_grad(Ga)
                        Sa = elastic_stress(Ea, mat)
                        for bb in range(4):
                            for cb in range(2):
                                Gb = np.zeros((2, 2))
                                Gb[cb] = np.array(dN[bb]) / h
                                val = wt * gv * ddot(Sa, sym_grad(Gb))
                                K[verts[a] + ca * nv, verts[bb] + cb * nv] += val
    C, masters = constraint_matrix(mesh)
    Z = np.zeros_like(C)
    C2 = np.block([[C, Z], [Z, C]])
    return C2.T @ K @ C2, masters


def dense_solve(K, b, fixed, values):
    """Solve ``K x = b`` with ``x[fixed] = values`` by plain elimination."""
    n = len(b)
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    x = np.zeros(n)
    x[fixed] = values
    x[free] = np.linalg.solve(K[np.ix_(free, free)], b[free] - K[np.ix_(free, ~free)] @ x[~free])
    return x


# ----------------------------------------------------------------------
# displacement estimator by loops
# ----------------------------------------------------------------------
def _local_field(mesh, vertex_values, c, xi, eta):
    """Value and physical gradient of a vertex field inside cell ``c``."""
    h = mesh.cell_h[c]
    N, dN = _shape(xi, eta)
    vv = vertex_values[mesh.cell_vertices[c]]
    val = sum(N[a] * vv[a] for a in range(4))
    grad = sum(np.multiply.outer(vv[a], np.array(dN[a]) / h) for a in range(4))
    return val, grad


def dense_estimate_u(mesh: QuadMesh, u_vertex, phi_vertex, mat: MaterialParams, neumann,
                     order=8):
    """Displacement estimator totals (eta1, eta2, eta3) by explicit loops.

    ``u_vertex`` (nv, 2) and ``phi_vertex`` (nv,) are values at all mesh
    vertices; ``neumann`` flags (side, component) pairs on the boundary.
    Second derivatives are taken by central differences of the exact
    bilinear gradients, which is exact for Q1.
    """
    _check_size(mesh)
    t, w = gauss_1d(order)
    C, masters = constraint_matrix(mesh)
    support = np.zeros((mesh.n_cells, len(masters)), dtype=bool)
    for c in range(mesh.n_cells):
        support[c] = np.any(np.abs(C[mesh.cell_vertices[c]]) > 0, axis=0)
    r2 = np.zeros(mesh.n_cells)
    for c in range(mesh.n_cells):
        h = mesh.cell_h[c]
        for i in range(order):
            for j in range(order):
                xi, eta = t[i], t[j]
                ph, gph = _local_field(mesh, phi_vertex, c, xi, eta)
                _, gu = _local_field(mesh, u_vertex, c, xi, eta)
                p = min(max(ph, 0.0), 1.0)
                g = degradation(ph, mat.kappa)
                dg = 2 * (1 - mat.kappa) * p * gph
                sig = elastic_stress(sym_grad(gu), mat)
                d = 1e-3
                div = np.zeros(2)
                for k, (dx, dy) in enumerate(((d, 0.0), (0.0, d))):
                    _, gp = _local_field(mesh, u_vertex, c, xi + dx, eta + dy)
                    _, gm = _local_field(mesh, u_vertex, c, xi - dx, eta - dy)
                    dsig = (elastic_stress(sym_grad(gp), mat) - elastic_stress(sym_grad(gm), mat))
                    div += dsig[:, k] / (2 * d * h)
                r = dg @ sig + g * div
                r2[c] += w[i] * w[j] * h * h * (r @ r)
    j_in = np.zeros(len(mesh.side_cells))
    j_bd = np.zeros(len(mesh.side_cells))
    for s, (a, b) in enumerate(mesh.side_cells):
        p0 = mesh.vertices[mesh.side_vertices[s, 0]]
        p1 = mesh.vertices[mesh.side_vertices[s, 1]]
        n = mesh.side_normal[s]
        length = np.hypot(*(p1 - p0))
        for i in range(order):
            x = p0 + t[i] * (p1 - p0)
            ra = (x - mesh.cell_origin[a]) / mesh.cell_h[a]
            ph, _ = _local_field(mesh, phi_vertex, a, *ra)
            g = degradation(ph, mat.kappa)
            _, ga = _local_field(mesh, u_vertex, a, *ra)
            sa = elastic_stress(sym_grad(ga), mat)
            if b >= 0:
                rb = (x - mesh.cell_origin[b]) / mesh.cell_h[b]
                _, gb = _local_field(mesh, u_vertex, b, *rb)
                jump = g * (sa - elastic_stress(sym_grad(gb), mat)) @ n
                j_in[s] += w[i] * length * (jump @ jump)
            else:
                tr = g * sa @ n * neumann[s]
                j_bd[s] += w[i] * length * (tr @ tr)
    e = np.zeros((3, len(masters)))
    for k in range(len(masters)):
        cells = np.nonzero(support[:, k])[0]
        pts = np.concatenate([mesh.cell_origin[cells], mesh.cell_origin[cells] + mesh.cell_h[cells, None]])
        hp = np.hypot(*(pts.max(axis=0) - pts.min(axis=0)))
        inner = [s for s, (a, b) in enumerate(mesh.side_cells)
                 if b >= 0 and support[a, k] and support[b, k]]
        bd = [s for s, (a, b) in enumerate(mesh.side_cells) if b < 0 and support[a, k]]
        e[0, k] = hp * np.sqrt(r2[cells].sum())
        e[1, k] = np.sqrt(hp) * np.sqrt(j_in[inner].sum())
        e[2, k] = np.sqrt(hp) * np.sqrt(j_bd[bd].sum())
    return tuple(float(np.sqrt(np.sum(x ** 2))) for x in e)


# ----------------------------------------------------------------------
# errors against a reference solution
# ----------------------------------------------------------------------
NORMS = ("eps-energy", "h1", "u-energy")


def reference_error(coarse, coarse_dofs: DofSystem, ref, ref_dofs: DofSystem, norm,
                    coeffs=None, mat=None, phi=None):
    """Norm of ``ref - coarse`` evaluated by quadrature on the reference mesh.

    ``eps-energy`` needs the reaction-diffusion ``coeffs`` on the reference
    mesh; ``u-energy`` needs the material and the coarse phase field ``phi``
    whose degradation weights the stress.
    """
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}; choose from {', '.join(NORMS)}")
    if not ref_dofs.mesh.is_refinement_of(coarse_dofs.mesh):
        raise MeshError("reference mesh does not refine the compared mesh")
    _, w = ref_dofs.quadrature_points()
    if coarse_dofs.mesh is ref_dofs.mesh:
        diff = np.asarray(ref) - np.asarray(coarse)
        ev = ref_dofs.at_quadrature(diff)
        eg = ref_dofs.grad_at_quadrature(diff)
    else:
        ev = ref_dofs.at_quadrature(ref) - transfer_to_quadrature(coarse, coarse_dofs, ref_dofs)
        eg = (ref_dofs.grad_at_quadrature(ref)
              - transfer_to_quadrature(coarse, coarse_dofs, ref_dofs, derivative=True))
    if norm == "u-energy":
        if mat is None or phi is None:
            raise ValueError("u-energy norm needs mat and phi")
        g = degradation(transfer_to_quadrature(phi, coarse_dofs, ref_dofs), mat.kappa)
        E = sym_grad(eg)
        dens = g * ddot(elastic_stress(E, mat), E)
    elif norm == "h1":
        dens = ev ** 2 + np.sum(eg ** 2, axis=-1)
    else:
        if coeffs is None:
            raise ValueError("eps-energy norm needs the reference coefficients")
        dens = coeffs.diffusion * np.sum(eg ** 2, axis=-1) + coeffs.reaction * ev ** 2
    return float(np.sqrt(max(np.sum(dens * w), 0.0)))


def transfer_coefficients(coeffs, fine_dofs: DofSystem):
    """Coarse VI coefficients seen from a nested fine mesh.

    The reaction is the coarse per-cell polynomial sampled at the fine
    quadrature points; the obstacle is interpolated nodally.
    """
    coarse = coeffs.dofs
    parent = fine_dofs.mesh.parent_cells(coarse.mesh)
    x, _ = fine_dofs.quadrature_points()
    cm = coarse.mesh
    ref = (x - cm.cell_origin[parent][:, None, :]) / cm.cell_h[parent][:, None, None]
    nq = ref.shape[1]
    c = coeffs.reaction_at(ref.reshape(-1, 2), np.repeat(parent, nq)).reshape(-1, nq)
    obstacle = coarse.evaluate(coeffs.obstacle, fine_dofs.coordinates)
    return VICoefficients(fine_dofs, c, coeffs.gc, coeffs.eps, coeffs.kappa, obstacle)
