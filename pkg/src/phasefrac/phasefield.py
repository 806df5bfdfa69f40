"""Phase-field obstacle problem, contact classes and the robust estimator.

Per time step the phase field solves

    a(phi, psi - phi) >= <Gc/eps, psi - phi>   for all psi <= o,

    a(z, v) = <c z, v> + Gc eps <grad z, grad v>,
    c = Gc/eps + (1 - kappa) sigma:E(u)      (sigma+:E with splitting),

where ``o`` is the nodal interpolant of the previous phase field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elasticity import MaterialParams, driving_density, strain_at_quadrature
from .fespace import (DofSystem, SolverError, SparseSystem, composite_1d, composite_2d,
                      gauss_1d, lagrange_1d, q1_basis, solve_spd)
from .mesh import MeshError

NO_CONTACT, SEMI_CONTACT, FULL_CONTACT = 0, 1, 2

# edge of the sub-patch squares relative to the cell edge
SUB = 1.0 / 8.0


# ----------------------------------------------------------------------
# coefficients
# ----------------------------------------------------------------------
@dataclass
class VICoefficients:
    """Data of one phase-field obstacle problem on ``dofs``.

    The reaction coefficient is stored at the Gauss points of every cell and
    extended inside a cell by tensor Lagrange interpolation, so integrals on
    nested meshes see the same per-cell polynomial.
    """

    dofs: DofSystem
    reaction: np.ndarray
    gc: float
    eps: float
    kappa: float
    obstacle: np.ndarray

    @property
    def diffusion(self):
        return self.gc * self.eps

    @property
    def source(self):
        return self.gc / self.eps

    def reaction_at(self, ref, cells=None):
        """Reaction coefficient at reference points ``ref`` (nq, 2) of cells.

        With ``cells`` given, ``ref`` is (npts, 2) and pairs with ``cells``.
        """
        nodes, _ = gauss_1d(self.dofs.order)
        Lx = lagrange_1d(nodes, ref[:, 0])
        Ly = lagrange_1d(nodes, ref[:, 1])
        n = len(nodes)
        if cells is None:
            R = self.reaction.reshape(-1, n, n)
            return np.einsum("qi,qj,cij->cq", Lx, Ly, R)
        R = self.reaction[cells].reshape(-1, n, n)
        return np.einsum("pi,pj,pij->p", Lx, Ly, R)

    def assemble(self):
        d = self.dofs
        A = d.assemble_bilinear(self.reaction, self.diffusion)
        return SparseSystem(A, d.assemble_load(self.source))


def build_coefficients(dofs: DofSystem, u, mat: MaterialParams, obstacle, splitting=False):
    E = strain_at_quadrature(dofs, u)
    c = mat.gc / mat.eps + (1.0 - mat.kappa) * driving_density(E, mat, splitting)
    return VICoefficients(dofs, c, mat.gc, mat.eps, mat.kappa, np.asarray(obstacle, dtype=float))


def unloaded_coefficients(dofs: DofSystem, mat: MaterialParams, obstacle):
    """Coefficients for u = 0."""
    nq = len(dofs.qwts)
    c = np.full((dofs.mesh.n_cells, nq), mat.gc / mat.eps)
    return VICoefficients(dofs, c, mat.gc, mat.eps, mat.kappa, np.asarray(obstacle, dtype=float))


# ----------------------------------------------------------------------
# primal-dual active set solve
# ----------------------------------------------------------------------
@dataclass
class VIResult:
    phi: np.ndarray
    multiplier: np.ndarray  # b - A phi, the nodal constraining force
    active: np.ndarray
    iterations: int
    system: SparseSystem = field(repr=False, default=None)

    def complementarity(self, obstacle):
        """max_p |min(o - phi, lambda)| with lambda scaled by the load magnitude."""
        lam = self.multiplier
        scale = np.abs(lam).max(initial=0.0)
        if self.system is not None:
            # lambda is pure roundoff in the intact state
            scale = max(scale, np.abs(self.system.rhs).max(initial=0.0))
        scale = max(scale, 1e-300)
        return float(np.abs(np.minimum(obstacle - self.phi, lam / scale)).max(initial=0.0))


def pdas(system: SparseSystem, obstacle, active0=None, penalty=None, max_iter=50):
    """Primal-dual active set method for ``A x <= b``-type obstacle problems.

    Minimises ``x.A x / 2 - b.x`` subject to ``x <= obstacle``.
    """
    A = system.matrix.tocsr()
    b = system.rhs
    n = len(b)
    o = np.asarray(obstacle, dtype=float)
    if penalty is None:
        penalty = np.ones(n)
    active = np.zeros(n, dtype=bool) if active0 is None else np.asarray(active0, dtype=bool).copy()
    # roundoff-level violations do not enter the active set
    thresh = 1e-12 * max(np.abs(b).max(initial=0.0), 1e-300)
    seen = set()
    for it in range(1, max_iter + 1):
        idx = np.nonzero(active)[0]
        x = solve_spd(system, idx, o[idx])
        lam = b - A @ x
        lam[~active] = 0.0
        new = lam + penalty * (x - o) > thresh
        if np.array_equal(new, active):
            return x, b - A @ x, active, it
        key = new.tobytes()
        if key in seen:
            # cycling on a non M-matrix: damp by keeping nodes that are
            # both violating and previously active
            new = new | (active & (x >= o))
            if np.array_equal(new, active):
                return x, b - A @ x, active, it
        seen.add(key)
        delta = int(np.sum(new != active))
        active = new
    raise SolverError(f"active set iteration did not settle after {max_iter} steps "
                      f"(last change {delta} nodes)")


def solve_vi(dofs: DofSystem, coeffs: VICoefficients, active0=None, max_iter=50):
    """Solve the discrete obstacle problem; returns a ``VIResult``."""
    system = coeffs.assemble()
    pen = 100.0 * coeffs.source * dofs.lumped_mass()
    x, lam, active, it = pdas(system, coeffs.obstacle, active0, pen, max_iter)
    return VIResult(x, lam, active, it, system)


# ----------------------------------------------------------------------
# residuals
# ----------------------------------------------------------------------
def element_residual(coeffs: VICoefficients, phi, ref=None):
    """r(phi) = Gc/eps + Gc eps lap(phi) - c phi at reference points.

    The Laplacian of a Q1 function vanishes on axis-aligned squares.
    """
    d = coeffs.dofs
    ph = d.at_quadrature(phi, ref)
    c = coeffs.reaction if ref is None else coeffs.reaction_at(ref)
    lap = 0.0
    return coeffs.source + coeffs.diffusion * lap - c * ph


def normal_jumps(dofs: DofSystem, phi, k=0, order=None):
    """Jump ``(grad phi_b - grad phi_a) . n_a`` on interior sides and the
    outward normal derivative on boundary sides, at side quadrature points.
    """
    ga, gb = dofs.on_sides(phi, gradient=True, k=k, order=order)
    n = dofs.mesh.side_normal
    da = np.einsum("sqd,sd->sq", ga, n)
    db = np.einsum("sqd,sd->sq", gb, n)
    inner = dofs.mesh.side_cells[:, 1] >= 0
    return np.where(inner[:, None], db - da, da)


def _side_shape_values(dofs, k=0):
    """Shape values of cell ``a`` at side quadrature points, (nside, nq1, 4)."""
    x, w = dofs.side_quadrature(k)
    a = dofs.mesh.side_cells[:, 0]
    ref = dofs._side_ref(a, x)
    N, _ = q1_basis(ref.reshape(-1, 2))
    return N.reshape(ref.shape[:2] + (4,)), w


@dataclass
class ConstrainingForce:
    algebraic: np.ndarray  # <Lambda, phi_p> from A, b
    integral: np.ndarray  # same by element residuals and jumps
    s: np.ndarray  # lumped node values
    support: np.ndarray  # int_{omega_p} phi_p

    @property
    def discrepancy(self):
        return float(np.abs(self.algebraic - self.integral).max(initial=0.0))


def constraining_force(dofs: DofSystem, phi, coeffs: VICoefficients, system=None, tol=1e-9):
    """Discrete constraining force tested with every basis function.

    Raises ``SolverError`` if the algebraic and integral forms disagree by
    more than ``tol`` relative to the source load.
    """
    if system is None:
        system = coeffs.assemble()
    alg = system.rhs - system.matrix @ phi
    m = dofs.mesh
    r = element_residual(coeffs, phi)
    h2 = m.cell_h ** 2
    elem = np.einsum("cq,qa->ca", r * dofs.qwts[None], dofs.N) * h2[:, None]
    J = normal_jumps(dofs, phi)
    inner = m.side_cells[:, 1] >= 0
    flux = coeffs.diffusion * np.where(inner[:, None], J, -J)
    Ns, ws = _side_shape_values(dofs)
    selem = np.einsum("sq,sqa->sa", flux * ws, Ns)
    nv = m.n_vertices
    v = np.bincount(m.cell_vertices.ravel(), weights=elem.ravel(), minlength=nv)
    v += np.bincount(m.cell_vertices[m.side_cells[:, 0]].ravel(), weights=selem.ravel(), minlength=nv)
    integ = dofs.P.T @ v
    support = dofs.lumped_mass()
    scale = max(np.abs(system.rhs).max(initial=0.0), 1e-300)
    cf = ConstrainingForce(alg, integ, alg / support, support)
    if cf.discrepancy > tol * scale:
        raise SolverError(f"constraining force representations differ by "
                          f"{cf.discrepancy / scale:.3e} (relative)")
    return cf


# ----------------------------------------------------------------------
# contact classes
# ----------------------------------------------------------------------
def _node_neighbours(dofs):
    S = dofs.mesh.cell_support
    G = (S.T @ S).tocsr()
    G.data[:] = 1.0
    return G


def classify_contact(dofs: DofSystem, phi, coeffs: VICoefficients, atol=1e-10):
    """Per-master contact class: ``NO_CONTACT``, ``SEMI_CONTACT`` or ``FULL_CONTACT``."""
    o = coeffs.obstacle
    touch = np.abs(phi - o) <= atol
    G = _node_neighbours(dofs)
    all_touch = (G @ (~touch).astype(float)) == 0
    S, I, _, _ = dofs.mesh.patch_tables
    r = element_residual(coeffs, phi)
    bad_cell = (r.min(axis=1) < -atol).astype(float)
    J = coeffs.diffusion * normal_jumps(dofs, phi)
    inner = dofs.mesh.side_cells[:, 1] >= 0
    bad_side = ((J.min(axis=1) < -atol) & inner).astype(float)
    sign_ok = (S.T @ bad_cell == 0) & (I.T @ bad_side == 0)
    cls = np.full(dofs.n_dofs, NO_CONTACT, dtype=np.int8)
    cls[touch] = SEMI_CONTACT
    cls[touch & all_touch & sign_ok] = FULL_CONTACT
    return cls


# ----------------------------------------------------------------------
# sub-patch integrals
# ----------------------------------------------------------------------
def _corner_pairs(dofs):
    """(cell, local corner, dof) for corners that are master vertices."""
    m = dofs.mesh
    cells, corners = np.nonzero(~m.hanging[m.cell_vertices])
    dof = m._master_index[m.cell_vertices[cells, corners]]
    return cells, corners, dof


def _basis_on_cells(dofs, cells, dof, ref):
    """Values of the global basis function ``dof`` at ``ref`` in ``cells``."""
    N, _ = q1_basis(ref)
    rows = dofs.mesh.cell_vertices[cells].ravel()
    coef = np.asarray(dofs.P[rows, np.repeat(dof, 4)]).reshape(len(cells), 4)
    return np.einsum("qa,pa->pq", N, coef)


def subpatch_integrals(dofs: DofSystem, f_values=None, k=0, probe=None):
    """Per-master ``int_{sub-patch} f phi_p`` and ``int_{sub-patch} phi_p``.

    ``f_values`` is a DOF vector on ``dofs``; alternatively ``probe`` is a
    ``(values, DofSystem)`` pair on a nested mesh at most ``k + 3`` levels
    finer, evaluated by point location.
    """
    m = dofs.mesh
    cells, corners, dof = _corner_pairs(dofs)
    ref0, w0 = composite_2d(k, dofs.order)
    ref0 = ref0 * SUB
    w0 = w0 * SUB ** 2
    # reflect the sub-square towards the corner
    cxy = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    out_f = np.zeros(dofs.n_dofs)
    out_1 = np.zeros(dofs.n_dofs)
    for corner in range(4):
        sel = corners == corner
        if not sel.any():
            continue
        c = cells[sel]
        ref = np.abs(cxy[corner] - ref0)
        phip = _basis_on_cells(dofs, c, dof[sel], ref)
        h2 = m.cell_h[c] ** 2
        out_1 += np.bincount(dof[sel], weights=h2 * (phip @ w0), minlength=dofs.n_dofs)
        if probe is not None:
            vals, pd = probe
            x = m.cell_origin[c][:, None, :] + m.cell_h[c][:, None, None] * ref[None]
            f = pd.evaluate(vals, x.reshape(-1, 2)).reshape(len(c), -1)
        elif f_values is not None:
            N, _ = q1_basis(ref)
            f = np.einsum("qa,pa->pq", N, dofs.cell_values(f_values)[c])
        else:
            continue
        out_f += np.bincount(dof[sel], weights=h2 * ((f * phip) @ w0), minlength=dofs.n_dofs)
    return out_f, out_1


# ----------------------------------------------------------------------
# estimator
# ----------------------------------------------------------------------
@dataclass
class PhaseFieldEstimate:
    eta1: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray
    eta4: np.ndarray
    classes: np.ndarray
    weight: np.ndarray
    alpha: np.ndarray
    standard: np.ndarray  # per-node non-robust estimator

    @property
    def totals(self):
        return tuple(float(np.sqrt(np.sum(e ** 2))) for e in (self.eta1, self.eta2, self.eta3, self.eta4))

    @property
    def total(self):
        return sum(self.totals)

    @property
    def local(self):
        return np.sqrt(self.eta1 ** 2 + self.eta2 ** 2 + self.eta3 ** 2 + self.eta4 ** 2)

    @property
    def standard_total(self):
        return float(np.sqrt(np.sum(self.standard ** 2)))

    @property
    def n_semi(self):
        return int(np.sum(self.classes == SEMI_CONTACT))

    @property
    def n_full(self):
        return int(np.sum(self.classes == FULL_CONTACT))


def patch_min(dofs, cell_vals):
    """Minimum of per-cell values over each master patch."""
    St = dofs.mesh.cell_support.tocsc()
    return np.minimum.reduceat(cell_vals[St.indices], St.indptr[:-1])


def estimate_phi(dofs: DofSystem, phi, coeffs: VICoefficients, classes=None, force=None,
                 order=4):
    """Per-node robust estimator contributions for a converged phase field.

    Squared residuals are integrated with an ``order``-point Gauss rule; the
    default is exact for the degree-6 integrands of Q1 data.
    """
    m = dofs.mesh
    if classes is None:
        classes = classify_contact(dofs, phi, coeffs)
    if force is None:
        force = constraining_force(dofs, phi, coeffs)
    gce = coeffs.diffusion
    ref, w = dofs.cell_rule(order)
    r = element_residual(coeffs, phi, ref)
    r2 = np.sum(r ** 2 * w, axis=1)
    J = gce * normal_jumps(dofs, phi, order=order)
    _, ws = dofs.side_quadrature(order=order)
    j2 = np.sum(J ** 2 * ws, axis=1)
    inner = m.side_cells[:, 1] >= 0
    jI = np.where(inner, j2, 0.0)
    jB = np.where(inner, 0.0, j2)
    hp = dofs.patch_diameter
    alpha = patch_min(dofs, coeffs.reaction.min(axis=1))
    wp = np.minimum(hp / np.sqrt(gce), alpha ** -0.5)
    R = np.sqrt(dofs.patch_sum(cell_vals=r2))
    JI = np.sqrt(dofs.patch_sum(interior_vals=jI))
    JB = np.sqrt(dofs.patch_sum(boundary_vals=jB))
    live = classes != FULL_CONTACT
    e1 = np.where(live, wp * R, 0.0)
    e2 = np.where(live, np.sqrt(wp) * gce ** -0.25 * JI, 0.0)
    e3 = np.where(live, np.sqrt(wp) * gce ** -0.25 * JB, 0.0)
    gap, _ = subpatch_integrals(dofs, coeffs.obstacle - phi)
    rad = force.s * gap
    semi = classes == SEMI_CONTACT
    scale = np.abs(force.s).max(initial=0.0) * np.abs(gap).max(initial=0.0)
    if np.any(semi & (rad < -1e-12 * max(scale, 1e-300))):
        raise SolverError("negative constraining-force radicand at a semi-contact node")
    e4 = np.where(semi, np.sqrt(np.maximum(rad, 0.0)), 0.0)
    std = np.where(live, np.sqrt(hp ** 2 * R ** 2 + hp * JI ** 2 + hp * JB ** 2), 0.0)
    std = np.sqrt(std ** 2 + e4 ** 2)
    return PhaseFieldEstimate(e1, e2, e3, e4, classes, wp, alpha, std)


def energy_norm(dofs: DofSystem, v, coeffs: VICoefficients):
    """(Gc eps |grad v|^2 + c v^2) integrated, square root; ``v`` on ``dofs``."""
    _, w = dofs.quadrature_points()
    val = dofs.at_quadrature(v)
    grad = dofs.grad_at_quadrature(v)
    dens = coeffs.diffusion * np.sum(grad ** 2, axis=-1) + coeffs.reaction * val ** 2
    return float(np.sqrt(np.sum(dens * w)))


# ----------------------------------------------------------------------
# Galerkin functional
# ----------------------------------------------------------------------
def _level_gap(coarse: DofSystem, fine: DofSystem):
    parent = fine.mesh.parent_cells(coarse.mesh)
    return int((fine.mesh.cell_level - coarse.mesh.cell_level[parent]).max(initial=0))


def galerkin_functional_check(dofs: DofSystem, phi, coeffs: VICoefficients, classes, force,
                              psi, psi_dofs: DofSystem = None):
    """Evaluate the Galerkin functional at ``psi`` in two ways.

    Returns ``(direct, representation)``.  ``direct`` is
    ``<Gc/eps, psi> - a(phi, psi) - <quasi-discrete force, psi>``;
    ``representation`` is the patch sum over non-full-contact nodes of
    residuals and jumps tested with ``(psi - c_p(psi)) phi_p``.
    """
    if psi_dofs is None:
        psi_dofs = dofs
    if not psi_dofs.mesh.is_refinement_of(dofs.mesh):
        raise MeshError("probe mesh does not refine the solution mesh")
    k = _level_gap(dofs, psi_dofs)
    m = dofs.mesh
    gce = coeffs.diffusion

    ref, wq = composite_2d(k, dofs.order)
    x = dofs.physical_points(ref)
    w = (m.cell_h ** 2)[:, None] * wq[None]
    ps = psi_dofs.evaluate(psi, x.reshape(-1, 2)).reshape(x.shape[:2])
    gps = psi_dofs.evaluate_gradient(psi, x.reshape(-1, 2)).reshape(x.shape[:2] + (2,))
    ph = dofs.at_quadrature(phi, ref)
    gph = dofs.grad_at_quadrature(phi, ref)
    c = coeffs.reaction_at(ref)
    r = coeffs.source - c * ph

    full = classes == FULL_CONTACT
    semi = classes == SEMI_CONTACT
    sub_f, sub_1 = subpatch_integrals(dofs, k=max(k - 3, 0), probe=(psi, psi_dofs))
    cp = sub_f / sub_1

    # direct path
    Xf = full.astype(float)
    xf = dofs.at_quadrature(Xf, ref)
    gxf = dofs.grad_at_quadrature(Xf, ref)
    base = np.sum((coeffs.source - c * ph) * ps * w) - gce * np.sum(np.sum(gph * gps, -1) * w)
    full_part = (np.sum((coeffs.source - c * ph) * ps * xf * w)
                 - gce * np.sum(np.sum(gph * (gps * xf[..., None] + ps[..., None] * gxf), -1) * w))
    semi_part = float(np.sum(force.algebraic[semi] * cp[semi]))
    direct = base - full_part - semi_part

    # representation path
    live = (~full).astype(float)
    X = dofs.at_quadrature(live, ref)
    Y = dofs.at_quadrature(live * cp, ref)
    rep = np.sum(r * (ps * X - Y) * w)
    xs, wsd = dofs.side_quadrature(k)
    J = normal_jumps(dofs, phi, k=k)
    inner = m.side_cells[:, 1] >= 0
    flux = gce * np.where(inner[:, None], J, -J)
    pss = psi_dofs.evaluate(psi, xs.reshape(-1, 2)).reshape(xs.shape[:2])
    Xs, _ = dofs.on_sides(live, k=k)
    Ys, _ = dofs.on_sides(live * cp, k=k)
    rep += np.sum(flux * (pss * Xs - Ys) * wsd)
    return float(direct), float(rep)
