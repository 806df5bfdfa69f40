"""Linear elasticity with phase-field degradation and tension/compression split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import DofSystem, SolverError, SparseSystem, solve_spd


@dataclass(frozen=True)
class MaterialParams:
    """Lamé constants (kN/mm^2), fracture toughness (kN/mm), regularisations."""

    mu: float
    lam: float
    gc: float
    kappa: float
    eps: float

    def __post_init__(self):
        if self.mu <= 0 or 3 * self.lam + 2 * self.mu <= 0:
            raise ValueError("Lamé constants must satisfy mu > 0 and 3 lambda + 2 mu > 0")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.eps <= 0 or self.gc <= 0:
            raise ValueError("eps and gc must be positive")


def degradation(phi, kappa):
    """g(phi) = (1 - kappa) phi^2 + kappa with phi clipped to [0, 1]."""
    p = np.clip(phi, 0.0, 1.0)
    return (1.0 - kappa) * p * p + kappa


def degradation_gradient(phi, grad_phi, kappa):
    """Gradient of g(phi) given phi and its gradient (last axis)."""
    p = np.clip(phi, 0.0, 1.0)
    return 2.0 * (1.0 - kappa) * p[..., None] * grad_phi


def sym_grad(grad_u):
    """Symmetric part of a displacement gradient ``grad_u[..., comp, dir]``."""
    return 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))


def elastic_stress(E, mat):
    tr = E[..., 0, 0] + E[..., 1, 1]
    return 2.0 * mat.mu * E + mat.lam * tr[..., None, None] * np.eye(2)


def ddot(A, B):
    return np.einsum("...ij,...ij->...", A, B)


# ----------------------------------------------------------------------
# spectral split
# ----------------------------------------------------------------------
@dataclass
class StrainSplit:
    E: np.ndarray
    E_plus: np.ndarray
    E_minus: np.ndarray
    d: np.ndarray
    Q: np.ndarray


@dataclass
class StressPair:
    sigma_plus: np.ndarray
    sigma_minus: np.ndarray
    # crack driving density sigma_plus : E
    driving: np.ndarray


def _eig_sym2(E):
    """Eigenvalues (ascending) and eigenvectors of symmetric 2x2 arrays.

    Repeated eigenvalues get the coordinate axes as eigenvectors.
    """
    a, b, c = E[..., 0, 0], E[..., 0, 1], E[..., 1, 1]
    mean = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    d = np.stack([mean - rad, mean + rad], axis=-1)
    # eigenvector of the larger eigenvalue, stable branch choice
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    ct, st = np.cos(theta), np.sin(theta)
    q_hi = np.stack([ct, st], axis=-1)
    q_lo = np.stack([-st, ct], axis=-1)
    Q = np.stack([q_lo, q_hi], axis=-1)
    scale = np.abs(a) + np.abs(c) + np.abs(b)
    degenerate = rad <= 1e-14 * scale
    if np.any(degenerate):
        Q = np.where(degenerate[..., None, None], np.eye(2), Q)
        d = np.where(degenerate[..., None], np.stack([a, c], axis=-1), d)
    return d, Q


def split_strain(E):
    """Spectral split ``E = E_plus + E_minus`` of symmetric 2x2 strains."""
    E = np.asarray(E, dtype=float)
    d, Q = _eig_sym2(E)
    dp = np.maximum(d, 0.0)
    dm = np.minimum(d, 0.0)
    Ep = np.einsum("...ik,...k,...jk->...ij", Q, dp, Q)
    Em = np.einsum("...ik,...k,...jk->...ij", Q, dm, Q)
    return StrainSplit(E, Ep, Em, d, Q)


def stress_split(E, mat):
    """Tensile and compressive stress parts and the driving density."""
    s = split_strain(E)
    tr = s.E[..., 0, 0] + s.E[..., 1, 1]
    eye = np.eye(2)
    sp_ = 2.0 * mat.mu * s.E_plus + mat.lam * np.maximum(tr, 0.0)[..., None, None] * eye
    sm_ = 2.0 * mat.mu * s.E_minus + mat.lam * np.minimum(tr, 0.0)[..., None, None] * eye
    drive = 2.0 * mat.mu * np.sum(np.maximum(s.d, 0.0) ** 2, axis=-1) + mat.lam * np.maximum(tr, 0.0) ** 2
    return StressPair(sp_, sm_, drive)


def driving_density(E, mat, splitting):
    """sigma:E, or sigma_plus:E with splitting; used as crack driving term."""
    if splitting:
        return stress_split(E, mat).driving
    return ddot(elastic_stress(E, mat), E)


def degraded_stress(E, g, mat, splitting):
    """g sigma, or g sigma_plus + sigma_minus with splitting."""
    if not splitting:
        return g[..., None, None] * elastic_stress(E, mat)
    s = stress_split(E, mat)
    return g[..., None, None] * s.sigma_plus + s.sigma_minus


# ----------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------
_VOIGT_BASIS = np.array([[[1.0, 0.0], [0.0, 0.0]],
                         [[0.0, 0.0], [0.0, 1.0]],
                         [[0.0, 0.5], [0.5, 0.0]]])


def _to_voigt(S):
    return np.stack([S[..., 0, 0], S[..., 1, 1], S[..., 0, 1]], axis=-1)


def isotropic_voigt(g, mat):
    """Voigt matrices of g * C for the isotropic Hooke tensor."""
    lam, mu = mat.lam, mat.mu
    D = np.array([[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]])
    return g[..., None, None] * D


def secant_voigt(E, g, mat):
    """Voigt matrices of the split secant operator frozen at strain ``E``.

    The operator maps ``E`` itself to ``g sigma_plus(E) + sigma_minus(E)``
    and is symmetric positive definite for ``g > 0``.
    """
    s = split_strain(E)
    tr = E[..., 0, 0] + E[..., 1, 1]
    one = np.ones_like(g)
    f = np.where(s.d > 0, g[..., None], one[..., None])
    f_tr = np.where(tr > 0, g, one)
    f_s = 0.5 * (f[..., 0] + f[..., 1])
    q1, q2 = s.Q[..., :, 0], s.Q[..., :, 1]
    P1 = np.einsum("...i,...j->...ij", q1, q1)
    P2 = np.einsum("...i,...j->...ij", q2, q2)
    S12 = np.einsum("...i,...j->...ij", q1, q2)
    S12 = S12 + np.swapaxes(S12, -1, -2)
    cols = []
    for B in _VOIGT_BASIS:
        e1 = ddot(P1, B)
        e2 = ddot(P2, B)
        e12 = 0.5 * ddot(S12, B)
        trB = B[0, 0] + B[1, 1]
        sig = 2.0 * mat.mu * (f[..., 0, None, None] * e1[..., None, None] * P1
                              + f[..., 1, None, None] * e2[..., None, None] * P2
                              + f_s[..., None, None] * e12[..., None, None] * S12)
        sig = sig + mat.lam * (f_tr * trB)[..., None, None] * np.eye(2)
        cols.append(_to_voigt(sig))
    return np.stack(cols, axis=-1)


def _b_matrix(dofs):
    """Strain-displacement table B[q, a, comp, voigt] on the unit reference cell."""
    dN = dofs.dN
    nq = dN.shape[0]
    B = np.zeros((nq, 4, 2, 3))
    B[:, :, 0, 0] = dN[:, :, 0]
    B[:, :, 1, 1] = dN[:, :, 1]
    B[:, :, 0, 2] = dN[:, :, 1]
    B[:, :, 1, 2] = dN[:, :, 0]
    return B


def vector_prolongation(dofs):
    return sp.block_diag([dofs.P, dofs.P]).tocsr()


def assemble_elasticity(dofs: DofSystem, D):
    """Stiffness matrix for Voigt material matrices ``D`` (ncell, nq, 3, 3).

    Unknowns are ordered ``[u_x dofs, u_y dofs]``.
    """
    B = _b_matrix(dofs)
    nq = len(dofs.qwts)
    # in 2D the 1/h^2 of the gradients cancels the h^2 of the cell area
    T = np.einsum("q,qaik,qbjl->qklaibj", dofs.qwts, B, B).reshape(nq * 9, 64)
    Ke = (D.reshape(len(D), nq * 9) @ T).reshape(-1, 4, 2, 4, 2)
    m = dofs.mesh
    nv = m.n_vertices
    cv = m.cell_vertices
    gidx = np.stack([cv, cv + nv], axis=2)  # (ncell, 4, 2)
    gidx = gidx.reshape(len(cv), 8)
    rows = np.repeat(gidx, 8, axis=1).ravel()
    cols = np.tile(gidx, (1, 8)).ravel()
    Kv = sp.csr_matrix((Ke.reshape(len(cv), 8, 8).ravel(), (rows, cols)), shape=(2 * nv, 2 * nv))
    P2 = vector_prolongation(dofs)
    return (P2.T @ Kv @ P2).tocsr()


def internal_force(dofs: DofSystem, stress_q):
    """Vector ``int sigma : E(w_k)`` for stresses at quadrature points."""
    B = _b_matrix(dofs)
    sv = _to_voigt(stress_q)
    fe = np.einsum("q,qaik,cqk->cai", dofs.qwts, B, sv) * dofs.mesh.cell_h[:, None, None]
    n = dofs.n_dofs
    fx = dofs.scatter_vector(fe[:, :, 0])
    fy = dofs.scatter_vector(fe[:, :, 1])
    return np.concatenate([fx[:n], fy[:n]])


# ----------------------------------------------------------------------
# boundary data and solve
# ----------------------------------------------------------------------
@dataclass
class DisplacementBC:
    """Dirichlet data per DOF and Neumann flags per (side, component).

    ``fixed`` and ``values`` have shape (ndof, 2); ``neumann`` has shape
    (nside, 2) and is only meaningful on boundary sides.
    """

    fixed: np.ndarray
    values: np.ndarray
    neumann: np.ndarray

    def flat(self):
        n = self.fixed.shape[0]
        mask = np.concatenate([self.fixed[:, 0], self.fixed[:, 1]])
        idx = np.nonzero(mask)[0]
        vals = np.concatenate([self.values[:, 0], self.values[:, 1]])[idx]
        return idx, vals, n


def strain_at_quadrature(dofs, u):
    return sym_grad(dofs.grad_at_quadrature(u))


def _unflatten(x, n):
    return np.stack([x[:n], x[n:]], axis=1)


def solve_displacement(dofs: DofSystem, phi_prev, bc: DisplacementBC, mat: MaterialParams,
                       splitting=False, u_init=None, tol=1e-8, max_iter=50):
    """Displacement at the new time step for the frozen phase field.

    Without splitting this is one linear solve.  With splitting a lagged
    secant fixed point is used: the split operator is frozen at the current
    iterate (exact there), the linear problem is solved, and the assembled
    residual on free DOFs is driven below ``tol`` relative to its initial
    value, or to roundoff level of the full internal force.

    Returns the displacement as an (ndof, 2) array.
    """
    g = degradation(dofs.at_quadrature(phi_prev), mat.kappa)
    idx, vals, n = bc.flat()
    if not splitting:
        K = assemble_elasticity(dofs, isotropic_voigt(g, mat))
        x = solve_spd(SparseSystem(K, np.zeros(2 * n)), idx, vals)
        return _unflatten(x, n)

    free = np.ones(2 * n, dtype=bool)
    free[idx] = False
    if u_init is None:
        K = assemble_elasticity(dofs, isotropic_voigt(g, mat))
        x = solve_spd(SparseSystem(K, np.zeros(2 * n)), idx, vals)
    else:
        x = np.concatenate([u_init[:, 0], u_init[:, 1]])
        x[idx] = vals

    def residual(x):
        E = strain_at_quadrature(dofs, _unflatten(x, n))
        f = internal_force(dofs, degraded_stress(E, g, mat, True))
        return E, f

    E, f = residual(x)
    r0 = np.linalg.norm(f[free])
    # a start that is already converged leaves r0 at roundoff
    floor = 1e-10 * max(np.linalg.norm(f), 1e-300)
    res = r0
    for it in range(max_iter):
        if res <= tol * r0 or res <= floor:
            return _unflatten(x, n)
        K = assemble_elasticity(dofs, secant_voigt(E, g, mat))
        x = solve_spd(SparseSystem(K, np.zeros(2 * n)), idx, vals)
        E, f = residual(x)
        res = np.linalg.norm(f[free])
    if res <= tol * r0 or res <= floor:
        return _unflatten(x, n)
    raise SolverError(f"split displacement iteration did not converge: "
                      f"relative residual {res / r0:.3e} after {max_iter} iterations")


# ----------------------------------------------------------------------
# residual estimator
# ----------------------------------------------------------------------
@dataclass
class DisplacementEstimate:
    eta1: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray

    @property
    def totals(self):
        return tuple(float(np.sqrt(np.sum(e ** 2))) for e in (self.eta1, self.eta2, self.eta3))

    @property
    def total(self):
        return sum(self.totals)

    @property
    def local(self):
        return np.sqrt(self.eta1 ** 2 + self.eta2 ** 2 + self.eta3 ** 2)


def interior_residual_u(dofs, u, phi, mat, ref=None):
    """grad g . sigma + g div sigma at reference points, shape (ncell, nq, 2)."""
    ph = dofs.at_quadrature(phi, ref)
    gphi = dofs.grad_at_quadrature(phi, ref)
    g = degradation(ph, mat.kappa)
    dg = degradation_gradient(ph, gphi, mat.kappa)
    sig = elastic_stress(sym_grad(dofs.grad_at_quadrature(u, ref)), mat)
    # Q1 shapes on squares: only the mixed second derivative survives
    uxy = dofs.mixed_derivative(u)  # (ncell, 2)
    div = (mat.lam + mat.mu) * np.stack([uxy[:, 1], uxy[:, 0]], axis=1)
    return np.einsum("cqi,cqij->cqj", dg, sig) + g[..., None] * div[:, None, :]


def side_jumps_u(dofs, u, phi, mat, order=None):
    """g (sigma_a - sigma_b) n_a on interior sides and g sigma n on boundary sides.

    Returns (nside, nq1, 2) values and side quadrature weights.
    """
    ga, gb = dofs.on_sides(u, gradient=True, order=order)
    pa, _ = dofs.on_sides(phi, order=order)
    g = degradation(pa, mat.kappa)
    sa = elastic_stress(sym_grad(ga), mat)
    sb = elastic_stress(sym_grad(gb), mat)
    n = dofs.mesh.side_normal
    inner = dofs.mesh.side_cells[:, 1] >= 0
    diff = np.where(inner[:, None, None, None], sa - sb, sa)
    J = g[..., None] * np.einsum("sqij,sj->sqi", diff, n)
    _, w = dofs.side_quadrature(order=order)
    return J, w


def estimate_u(dofs: DofSystem, u, phi_prev, mat: MaterialParams, bc: DisplacementBC, order=4):
    """Per-node residual estimator contributions for the displacement.

    Always uses the unsplit stress.  ``order`` is the Gauss rule for the
    squared residuals (4 points integrate the degree-6 integrands exactly).
    """
    m = dofs.mesh
    ref, w = dofs.cell_rule(order)
    r = interior_residual_u(dofs, u, phi_prev, mat, ref)
    r2 = np.sum(np.sum(r ** 2, axis=-1) * w, axis=1)
    J, ws = side_jumps_u(dofs, u, phi_prev, mat, order)
    inner = m.side_cells[:, 1] >= 0
    j2 = np.sum(np.sum(J ** 2, axis=-1) * ws, axis=1)
    jI = np.where(inner, j2, 0.0)
    JN = J * bc.neumann[:, None, :]
    jN = np.where(inner, 0.0, np.sum(np.sum(JN ** 2, axis=-1) * ws, axis=1))
    hp = dofs.patch_diameter
    e1 = hp * np.sqrt(dofs.patch_sum(cell_vals=r2))
    e2 = np.sqrt(hp) * np.sqrt(dofs.patch_sum(interior_vals=jI))
    e3 = np.sqrt(hp) * np.sqrt(dofs.patch_sum(boundary_vals=jN))
    return DisplacementEstimate(e1, e2, e3)
