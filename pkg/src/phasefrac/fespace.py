"""Continuous Q1 elements on quadtree meshes.

Hanging vertices are eliminated through the mesh prolongation ``P``:
vertex values are ``P @ dof_values``, and element matrices are condensed
as ``P.T @ A_vertex @ P``.  All cells are axis-aligned squares, so the
reference map is ``x = origin + h * (xi, eta)`` with ``(xi, eta)`` in
``[0, 1]^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import QuadMesh, MeshError


class SolverError(RuntimeError):
    """Raised when a linear or nonlinear solve does not meet its tolerance."""


def gauss_1d(n):
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_2d(n):
    x, w = gauss_1d(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return np.stack([X.ravel(), Y.ravel()], axis=1), W.ravel()


def composite_1d(k, n):
    """Gauss rule with ``n`` points on each of ``2**k`` equal pieces of [0, 1]."""
    x, w = gauss_1d(n)
    m = 1 << k
    off = np.arange(m)[:, None] / m
    return (off + x[None] / m).ravel(), np.tile(w / m, m)


def composite_2d(k, n):
    x, w = composite_1d(k, n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1), np.outer(w, w).ravel()


def lagrange_1d(nodes, t):
    """Lagrange basis through ``nodes`` evaluated at ``t``, shape (len(t), len(nodes))."""
    t = np.asarray(t, dtype=float)
    L = np.ones((len(t), len(nodes)))
    for i, xi in enumerate(nodes):
        for j, xj in enumerate(nodes):
            if i != j:
                L[:, i] *= (t - xj) / (xi - xj)
    return L


def q1_basis(ref):
    """Values (npts, 4) and reference gradients (npts, 4, 2) of Q1 shapes."""
    ref = np.atleast_2d(ref)
    x, y = ref[:, 0], ref[:, 1]
    N = np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y], axis=1)
    dN = np.empty((len(ref), 4, 2))
    dN[:, 0] = np.stack([-(1 - y), -(1 - x)], axis=1)
    dN[:, 1] = np.stack([(1 - y), -x], axis=1)
    dN[:, 2] = np.stack([y, x], axis=1)
    dN[:, 3] = np.stack([-y, (1 - x)], axis=1)
    return N, dN


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray


class DofSystem:
    """Degrees of freedom of the scalar Q1 space on a mesh.

    One DOF per master (non-hanging) vertex.  Vector fields use one copy of
    this space per component.
    """

    def __init__(self, mesh: QuadMesh, order: int = 3):
        self.mesh = mesh
        self.order = order
        self.P = mesh.prolongation
        self.n_dofs = self.P.shape[1]
        self.dof_vertex = mesh.master_vertices
        self.qpts, self.qwts = gauss_2d(order)
        self.N, self.dN = q1_basis(self.qpts)
        self._cell_P = None

    @property
    def coordinates(self):
        return self.mesh.vertices[self.dof_vertex]

    def vertex_of_dof(self, dof):
        return self.dof_vertex[dof]

    def dof_of_vertex(self, v):
        return self.mesh._master_index[v]

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------
    def vertex_values(self, values):
        return self.P @ values

    def cell_values(self, values):
        """Corner values per cell, shape (ncell, 4[, ncomp])."""
        return self.vertex_values(values)[self.mesh.cell_vertices]

    def at_quadrature(self, values, ref=None):
        """Values at reference points in every cell, shape (ncell, nq[, ncomp])."""
        N = self.N if ref is None else q1_basis(ref)[0]
        cv = self.cell_values(values)
        return np.einsum("qa,ca...->cq...", N, cv)

    def grad_at_quadrature(self, values, ref=None):
        """Physical gradients, shape (ncell, nq, 2) or (ncell, nq, ncomp, 2)."""
        dN = self.dN if ref is None else q1_basis(ref)[1]
        cv = self.cell_values(values)
        g = np.einsum("qad,ca...->cq...d", dN, cv)
        h = self.mesh.cell_h
        return g / h.reshape((-1,) + (1,) * (g.ndim - 1))

    def mixed_derivative(self, values):
        """d^2/dxdy per cell (constant for Q1), shape (ncell[, ncomp])."""
        cv = self.cell_values(values)
        d = cv[:, 0] - cv[:, 1] + cv[:, 2] - cv[:, 3]
        h2 = self.mesh.cell_h ** 2
        return d / h2.reshape((-1,) + (1,) * (d.ndim - 1))

    def evaluate(self, values, points):
        """Field values at arbitrary points of the domain."""
        cells, ref = self.mesh.locate(points)
        N, _ = q1_basis(ref)
        cv = self.cell_values(values)[cells]
        return np.einsum("pa,pa...->p...", N, cv)

    def evaluate_gradient(self, values, points):
        cells, ref = self.mesh.locate(points)
        _, dN = q1_basis(ref)
        cv = self.cell_values(values)[cells]
        g = np.einsum("pad,pa...->p...d", dN, cv)
        h = self.mesh.cell_h[cells]
        return g / h.reshape((-1,) + (1,) * (g.ndim - 1))

    def quadrature_points(self):
        """Physical quadrature points (ncell, nq, 2) and weights (ncell, nq)."""
        m = self.mesh
        x = m.cell_origin[:, None, :] + m.cell_h[:, None, None] * self.qpts[None]
        w = (m.cell_h ** 2)[:, None] * self.qwts[None]
        return x, w

    def physical_points(self, ref):
        """Map reference points (nq, 2) into every cell, shape (ncell, nq, 2)."""
        m = self.mesh
        return m.cell_origin[:, None, :] + m.cell_h[:, None, None] * ref[None]

    def cell_rule(self, order=None):
        """Reference points and physical weights (ncell, nq) of a Gauss rule."""
        if order is None or order == self.order:
            ref, w = self.qpts, self.qwts
        else:
            ref, w = gauss_2d(order)
        return ref, (self.mesh.cell_h ** 2)[:, None] * w[None]

    def integrate(self, q_values):
        """Integral of a quantity given at quadrature points."""
        _, w = self.quadrature_points()
        return float(np.sum(q_values * w))

    def integrate_cells(self, q_values):
        _, w = self.quadrature_points()
        return np.sum(q_values * w, axis=1)

    def side_quadrature(self, k=0, order=None):
        """Physical Gauss points (nside, nq1, 2) and weights (nside, nq1) on sides.

        ``k`` > 0 selects a composite rule on ``2**k`` pieces per side.
        """
        m = self.mesh
        t, w = composite_1d(k, order or self.order)
        p0 = m.vertices[m.side_vertices[:, 0]]
        p1 = m.vertices[m.side_vertices[:, 1]]
        x = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
        return x, m.side_length[:, None] * w[None]

    def _side_ref(self, cells, x):
        m = self.mesh
        return (x - m.cell_origin[cells][:, None, :]) / m.cell_h[cells][:, None, None]

    def on_sides(self, values, gradient=False, k=0, order=None):
        """Traces from both sides of every mesh side at the side Gauss points.

        Returns ``(from_a, from_b)`` with leading shape (nside, nq1).  For
        boundary sides ``from_b`` repeats ``from_a``.
        """
        m = self.mesh
        x, _ = self.side_quadrature(k, order)
        a, b = m.side_cells.T
        b = np.where(b >= 0, b, a)
        cv = self.cell_values(values)
        out = []
        for cells in (a, b):
            ref = self._side_ref(cells, x)
            shp = ref.shape[:2]
            N, dN = q1_basis(ref.reshape(-1, 2))
            c = cv[np.repeat(cells, shp[1])]
            if gradient:
                g = np.einsum("pad,pa...->p...d", dN, c)
                h = np.repeat(m.cell_h[cells], shp[1])
                g = g / h.reshape((-1,) + (1,) * (g.ndim - 1))
            else:
                g = np.einsum("pa,pa...->p...", N, c)
            out.append(g.reshape(shp + g.shape[1:]))
        return out[0], out[1]

    def patch_sum(self, cell_vals=None, interior_vals=None, boundary_vals=None):
        """Per-master sums of cell and side quantities over each patch."""
        S, I, B, _ = self.mesh.patch_tables
        out = np.zeros(self.n_dofs)
        if cell_vals is not None:
            out += S.T @ cell_vals
        if interior_vals is not None:
            out += I.T @ interior_vals
        if boundary_vals is not None:
            out += B.T @ boundary_vals
        return out

    @property
    def patch_diameter(self):
        return self.mesh.patch_tables[3]

    def constant(self, value):
        return np.full(self.n_dofs, float(value))

    def interpolate_function(self, f):
        """Nodal interpolant of a callable ``f(x, y)``."""
        xy = self.coordinates
        return np.asarray(f(xy[:, 0], xy[:, 1]), dtype=float)

    # ------------------------------------------------------------------
    # assembly
    # ------------------------------------------------------------------
    def _scatter(self, elem):
        """Sum element matrices (ncell, 4, 4) into the condensed DOF matrix."""
        cv = self.mesh.cell_vertices
        rows = np.repeat(cv, 4, axis=1).ravel()
        cols = np.tile(cv, (1, 4)).ravel()
        nv = self.mesh.n_vertices
        Av = sp.csr_matrix((elem.ravel(), (rows, cols)), shape=(nv, nv))
        return (self.P.T @ Av @ self.P).tocsr()

    def scatter_vector(self, elem):
        """Sum element vectors (ncell, 4) into a DOF vector."""
        nv = self.mesh.n_vertices
        v = np.bincount(self.mesh.cell_vertices.ravel(), weights=elem.ravel(), minlength=nv)
        return self.P.T @ v

    def element_mass(self, c_q):
        h2 = self.mesh.cell_h ** 2
        NN = np.einsum("qa,qb->qab", self.N, self.N)
        return np.einsum("cq,qab->cab", c_q * self.qwts[None], NN) * h2[:, None, None]

    def element_stiffness(self, k_q):
        GG = np.einsum("qad,qbd->qab", self.dN, self.dN)
        return np.einsum("cq,qab->cab", k_q * self.qwts[None], GG)

    def assemble_bilinear(self, coefficient, diffusion):
        """Matrix of ``(c u, v) + (k grad u, grad v)``.

        Parameters
        ----------
        coefficient : ndarray (ncell, nq) or float
            Reaction coefficient at the quadrature points.
        diffusion : ndarray (ncell, nq) or float
            Diffusion coefficient.
        """
        nc, nq = self.mesh.n_cells, len(self.qwts)
        c_q = np.broadcast_to(np.asarray(coefficient, dtype=float), (nc, nq))
        k_q = np.broadcast_to(np.asarray(diffusion, dtype=float), (nc, nq))
        if np.any(c_q < 0) or np.any(k_q < 0):
            raise ValueError("negative coefficient at a quadrature point")
        return self._scatter(self.element_mass(c_q) + self.element_stiffness(k_q))

    def assemble_load(self, f_q):
        nc, nq = self.mesh.n_cells, len(self.qwts)
        f_q = np.broadcast_to(np.asarray(f_q, dtype=float), (nc, nq))
        h2 = self.mesh.cell_h ** 2
        elem = np.einsum("cq,qa->ca", f_q * self.qwts[None], self.N) * h2[:, None]
        return self.scatter_vector(elem)

    def mass_matrix(self):
        return self.assemble_bilinear(1.0, 0.0)

    def lumped_mass(self):
        """Integral of each basis function."""
        return self.assemble_load(1.0)


def assemble_bilinear(dofs: DofSystem, coefficient, diffusion, load=0.0) -> SparseSystem:
    """Assemble ``(c u, v) + (k grad u, grad v) = (f, v)`` on ``dofs``."""
    A = dofs.assemble_bilinear(coefficient, diffusion)
    return SparseSystem(A, dofs.assemble_load(load))


def solve_spd(system: SparseSystem, fixed=None, fixed_values=None, rtol=1e-10):
    """Solve a symmetric positive definite system with optional fixed DOFs.

    Fixed DOFs are eliminated symmetrically; the returned vector contains
    the prescribed values there.
    """
    A = system.matrix.tocsr()
    b = np.asarray(system.rhs, dtype=float)
    n = A.shape[0]
    x = np.zeros(n)
    if fixed is None:
        free = np.arange(n)
    else:
        mask = np.ones(n, dtype=bool)
        mask[fixed] = False
        free = np.nonzero(mask)[0]
        x[fixed] = fixed_values
    rhs = b[free] - A[free] @ x
    if not free.size:
        return x
    Aff = A[free][:, free].tocsc()
    if np.linalg.norm(rhs) == 0.0:
        return x
    xf = _direct_solve(Aff, rhs)
    res = np.linalg.norm(Aff @ xf - rhs)
    scale = np.linalg.norm(rhs)
    if not np.isfinite(res) or res > rtol * scale:
        raise SolverError(f"linear solve residual {res / scale:.3e} exceeds {rtol:.1e}")
    x[free] = xf
    return x


def _direct_solve(A, b):
    try:
        # SPD: diagonal pivots keep the symmetric fill-reducing ordering,
        # which row pivoting on tiny degraded entries would destroy
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    x = lu.solve(b)
    # one step of iterative refinement keeps the residual well below 1e-10
    r = b - A @ x
    return x + lu.solve(r)


def interpolate_nodal(values, src: DofSystem, dst: DofSystem):
    """Nodal interpolant on ``dst`` of a field living on ``src``.

    ``dst.mesh`` must be a refinement of (or equal to) ``src.mesh``.
    """
    if not dst.mesh.is_refinement_of(src.mesh):
        raise MeshError("target mesh does not refine the source mesh")
    return src.evaluate(values, dst.coordinates)


def transfer_to_quadrature(values, src: DofSystem, fine: DofSystem, derivative=False):
    """Evaluate a coarse field at the quadrature points of a nested fine mesh.

    Returns values (ncell_fine, nq[, ncomp]) or gradients when
    ``derivative`` is set.  Exact because each fine cell lies inside one
    coarse cell where the field is a single polynomial.
    """
    parent = fine.mesh.parent_cells(src.mesh)
    x, _ = fine.quadrature_points()
    cm = src.mesh
    ref = (x - cm.cell_origin[parent][:, None, :]) / cm.cell_h[parent][:, None, None]
    shp = ref.shape[:2]
    ref = ref.reshape(-1, 2)
    N, dN = q1_basis(ref)
    cv = src.cell_values(values)[np.repeat(parent, shp[1])]
    if not derivative:
        out = np.einsum("pa,pa...->p...", N, cv)
        return out.reshape(shp + out.shape[1:])
    g = np.einsum("pad,pa...->p...d", dN, cv)
    h = np.repeat(cm.cell_h[parent], shp[1])
    g = g / h.reshape((-1,) + (1,) * (g.ndim - 1))
    return g.reshape(shp + g.shape[1:])
