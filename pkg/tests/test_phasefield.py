import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phasefrac import oracle
from phasefrac.fespace import DofSystem, SolverError, gauss_1d, q1_basis
from phasefrac.mesh import build_initial_mesh
from phasefrac.phasefield import (FULL_CONTACT, NO_CONTACT, SEMI_CONTACT, VICoefficients,
                                  classify_contact, constraining_force, element_residual,
                                  energy_norm, estimate_phi, galerkin_functional_check, pdas,
                                  solve_vi, unloaded_coefficients)

GC, EPS, KAPPA = 2.7e-3, 0.088, 1e-8


def square(n):
    return build_initial_mesh("unit-square", np.sqrt(2) / n)


def coeffs_from(d, c_fun, obstacle, gc=GC, eps=EPS):
    x, _ = d.quadrature_points()
    c = c_fun(x[..., 0], x[..., 1]) * np.ones(x.shape[:2])
    return VICoefficients(d, c, gc, eps, KAPPA, np.asarray(obstacle, dtype=float))


def vertex_dof(d, x, y):
    return int(np.argmin(np.hypot(d.coordinates[:, 0] - x, d.coordinates[:, 1] - y)))


def single_contact(n=4):
    """Obstacle lowered below the free solution 1/2 at one interior node."""
    d = DofSystem(square(n))
    p = vertex_dof(d, 0.5, 0.5)
    o = np.ones(d.n_dofs)
    o[p] = 0.3
    co = coeffs_from(d, lambda x, y: 2 * GC / EPS + 0.0 * x, o)
    return d, co, p


# ----------------------------------------------------------------------
# solve
# ----------------------------------------------------------------------
def test_unloaded_unit_obstacle_gives_one():
    d = DofSystem(square(4))
    co = unloaded_coefficients(d, _mat(), np.ones(d.n_dofs))
    res = solve_vi(d, co)
    assert np.allclose(res.phi, 1.0, atol=1e-12)
    assert np.abs(res.multiplier).max() <= 1e-12 * GC / EPS


def _mat():
    from phasefrac.elasticity import MaterialParams
    return MaterialParams(mu=80.77, lam=121.15, gc=GC, kappa=KAPPA, eps=EPS)


def test_uniform_driving_gives_scalar_solution():
    d = DofSystem(square(4))
    c = 40 * GC / EPS
    co = coeffs_from(d, lambda x, y: c + 0 * x, np.ones(d.n_dofs))
    res = solve_vi(d, co)
    assert np.allclose(res.phi, (GC / EPS) / c, rtol=1e-12)
    assert not res.active.any()


def _hanging_problem(seed):
    rng = np.random.default_rng(seed)
    m = square(2).refine([int(rng.integers(4))])
    d = DofSystem(m)
    a, b, c = rng.uniform(0, 30, 3)
    co = coeffs_from(d, lambda x, y: GC / EPS * (1 + a * x ** 2 + b * y + c * x * y),
                     rng.uniform(0.05, 1.0, d.n_dofs))
    return d, co


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_vi_matches_enumeration(seed):
    d, co = _hanging_problem(seed)
    assert d.n_dofs <= 13
    res = solve_vi(d, co)
    s = co.assemble()
    ref = oracle.enumerate_vi(s.matrix.toarray(), s.rhs, co.obstacle)
    assert np.abs(res.phi - ref).max() <= 1e-10 * max(np.abs(ref).max(), 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_vi_complementarity(seed):
    d, co = _hanging_problem(seed)
    res = solve_vi(d, co)
    o = co.obstacle
    lam = res.multiplier
    scale = np.abs(co.assemble().rhs).max()
    assert np.all(res.phi <= o + 1e-12)
    assert np.all(lam[res.active] >= -1e-10 * scale)
    assert np.abs(lam[~res.active]).max(initial=0) <= 1e-10 * scale
    assert np.all(res.phi[res.active] == o[res.active])
    assert np.abs(np.minimum(o - res.phi, lam / scale)).max() <= 1e-9


def test_pdas_reports_nonconvergence():
    d, co = _hanging_problem(3)
    s = co.assemble()
    o = np.full(d.n_dofs, 0.01)
    with pytest.raises(SolverError, match="last change"):
        pdas(s, o, max_iter=1)


def test_warm_start_is_accepted():
    d, co = _hanging_problem(5)
    first = solve_vi(d, co)
    again = solve_vi(d, co, active0=first.active)
    assert again.iterations == 1
    assert np.allclose(again.phi, first.phi)


# ----------------------------------------------------------------------
# residual, force, classes
# ----------------------------------------------------------------------
def test_element_residual_trivial():
    d = DofSystem(square(3))
    co = unloaded_coefficients(d, _mat(), np.ones(d.n_dofs))
    assert np.abs(element_residual(co, np.ones(d.n_dofs))).max() <= 1e-12
    assert np.allclose(element_residual(co, np.zeros(d.n_dofs)), GC / EPS)


def test_element_residual_symbolic():
    # one cell, corner values given: phi = sum v_a N_a, c = 2 + x y
    d = DofSystem(square(1))
    v = np.array([0.3, 0.7, -0.2, 0.9])
    xy = d.coordinates
    co = coeffs_from(d, lambda x, y: 2 + x * y, np.ones(4), gc=1.0, eps=1.0)
    ref = np.array([[0.1, 0.2], [0.8, 0.5], [0.33, 0.9]])
    r = element_residual(co, v, ref)[0]
    for k, (s, t) in enumerate(ref):
        phi = sum(v[i] * (1 - abs(xy[i, 0] - s)) * (1 - abs(xy[i, 1] - t)) for i in range(4))
        assert r[k] == pytest.approx(1.0 - (2 + s * t) * phi, abs=1e-14)


def test_force_zero_for_unconstrained_and_trivial():
    d = DofSystem(square(4))
    co = coeffs_from(d, lambda x, y: GC / EPS * (2 + x), np.ones(d.n_dofs))
    res = solve_vi(d, co)
    f = constraining_force(d, res.phi, co)
    assert np.abs(f.algebraic).max() <= 1e-10 * GC / EPS
    one = unloaded_coefficients(d, _mat(), np.ones(d.n_dofs))
    f1 = constraining_force(d, np.ones(d.n_dofs), one)
    assert np.abs(f1.algebraic).max() <= 1e-14


def test_force_dual_path_with_contact():
    d, co, p = single_contact()
    res = solve_vi(d, co)
    f = constraining_force(d, res.phi, co)
    assert f.s[p] > 0
    assert f.discrepancy <= 1e-9 * GC / EPS
    others = np.arange(d.n_dofs) != p
    assert np.abs(f.algebraic[others]).max() <= 1e-10 * GC / EPS


def test_force_dual_path_hanging():
    for seed in range(5):
        d, co = _hanging_problem(seed)
        res = solve_vi(d, co)
        f = constraining_force(d, res.phi, co)
        assert f.discrepancy <= 1e-9 * np.abs(co.assemble().rhs).max()
        assert np.all(f.s[res.active] >= -1e-10 * np.abs(f.s).max())


def test_classify_no_contact():
    d = DofSystem(square(4))
    co = coeffs_from(d, lambda x, y: GC / EPS * (2 + x), np.ones(d.n_dofs))
    res = solve_vi(d, co)
    assert np.all(classify_contact(d, res.phi, co) == NO_CONTACT)


def test_classify_full_contact():
    d = DofSystem(square(4))
    co = unloaded_coefficients(d, _mat(), np.ones(d.n_dofs))
    assert np.all(classify_contact(d, np.ones(d.n_dofs), co) == FULL_CONTACT)


def test_classify_single_semi_contact():
    d, co, p = single_contact()
    res = solve_vi(d, co)
    cls = classify_contact(d, res.phi, co)
    assert cls[p] == SEMI_CONTACT
    assert np.all(cls[np.arange(d.n_dofs) != p] == NO_CONTACT)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_classification_definition(seed):
    d, co = _hanging_problem(seed)
    res = solve_vi(d, co)
    cls = classify_contact(d, res.phi, co)
    touch = np.abs(res.phi - co.obstacle) <= 1e-10
    assert np.all((cls != NO_CONTACT) == touch)
    m = d.mesh
    for k in np.nonzero(cls == FULL_CONTACT)[0]:
        cells = m.patch_of(d.dof_vertex[k]).cells
        verts = np.unique(m.cell_vertices[cells])
        vals = d.vertex_values(res.phi)[verts] - d.vertex_values(co.obstacle)[verts]
        assert np.abs(vals).max() <= 1e-10


# ----------------------------------------------------------------------
# estimator
# ----------------------------------------------------------------------
def test_estimator_zero_for_trivial_state():
    d = DofSystem(square(4))
    co = unloaded_coefficients(d, _mat(), np.ones(d.n_dofs))
    e = estimate_phi(d, np.ones(d.n_dofs), co)
    assert e.total == 0.0


def _independent_robust_estimator(d, phi, gc, eps, c_fun):
    """Per-node robust residual estimator by loops over cells and sides."""
    m = d.mesh
    gce = gc * eps
    t, wt = gauss_1d(5)
    full = d.vertex_values(phi)
    corner = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)

    def local(c, s, u):
        ref = np.array([[s, u]])
        N, dN = q1_basis(ref)
        h = m.cell_h[c]
        vals = full[m.cell_vertices[c]]
        return float(N[0] @ vals), dN[0].T @ vals / h

    r2 = np.zeros(m.n_cells)
    cmin = np.zeros(m.n_cells)
    gt, _ = gauss_1d(d.order)
    for c in range(m.n_cells):
        h = m.cell_h[c]
        o = m.cell_origin[c]
        for i, s in enumerate(t):
            for j, u in enumerate(t):
                val, _ = local(c, s, u)
                x, y = o + h * np.array([s, u])
                r2[c] += wt[i] * wt[j] * h * h * (gc / eps - c_fun(x, y) * val) ** 2
        cmin[c] = min(c_fun(*(o + h * np.array([s, u]))) for s in gt for u in gt)
    j2 = np.zeros(m.n_sides)
    for s in range(m.n_sides):
        a, b = m.side_cells[s]
        p0, p1 = m.vertices[m.side_vertices[s]]
        n = m.side_normal[s]
        for k, tk in enumerate(t):
            x = p0 + tk * (p1 - p0)
            _, ga = local(a, *((x - m.cell_origin[a]) / m.cell_h[a]))
            jump = -ga @ n if b < 0 else None
            if b >= 0:
                _, gb = local(b, *((x - m.cell_origin[b]) / m.cell_h[b]))
                jump = (gb - ga) @ n
            else:
                jump = ga @ n
            j2[s] += wt[k] * m.side_length[s] * (gce * jump) ** 2
    out = np.zeros(d.n_dofs)
    for k, v in enumerate(d.dof_vertex):
        p = m.patch_of(v)
        alpha = cmin[p.cells].min()
        w = min(p.diameter / np.sqrt(gce), alpha ** -0.5)
        e1 = w * np.sqrt(r2[p.cells].sum())
        e2 = np.sqrt(w) * gce ** -0.25 * np.sqrt(j2[p.interior_sides].sum())
        e3 = np.sqrt(w) * gce ** -0.25 * np.sqrt(j2[p.boundary_sides].sum())
        out[k] = np.sqrt(e1 ** 2 + e2 ** 2 + e3 ** 2)
    return out


def test_estimator_reduces_without_contact():
    c_fun = lambda x, y: GC / EPS * (2 + x * x * y)
    for mesh in (square(4), square(2).refine([1]).refine([0])):
        d = DofSystem(mesh)
        co = coeffs_from(d, c_fun, np.ones(d.n_dofs))
        res = solve_vi(d, co)
        e = estimate_phi(d, res.phi, co)
        assert e.n_semi == 0 and e.n_full == 0
        assert np.all(e.eta4 == 0)
        ref = _independent_robust_estimator(d, res.phi, GC, EPS, c_fun)
        assert np.allclose(e.local, ref, rtol=1e-12, atol=1e-14 * ref.max())


def test_estimator_contact_contribution():
    d, co, p = single_contact(8)
    res = solve_vi(d, co)
    e = estimate_phi(d, res.phi, co)
    assert e.n_semi == 1
    # the gap o - phi vanishes at p but not on its sub-patch
    assert e.eta4[p] > 0
    assert np.count_nonzero(e.eta4) == 1


def test_estimator_doubled_quadrature_hanging():
    d, co = _hanging_problem(11)
    res = solve_vi(d, co)
    a = estimate_phi(d, res.phi, co, order=4)
    b = estimate_phi(d, res.phi, co, order=8)
    assert a.total > 0
    assert b.total == pytest.approx(a.total, rel=1e-8)


def test_weight_monotone_under_scaling():
    d = DofSystem(square(4))
    co = coeffs_from(d, lambda x, y: GC / EPS * (2 + x), np.ones(d.n_dofs))
    res = solve_vi(d, co)
    e = estimate_phi(d, res.phi, co)
    big = VICoefficients(d, co.reaction * 100, GC, EPS, KAPPA, co.obstacle)
    e2 = estimate_phi(d, res.phi, big, classes=e.classes,
                      force=constraining_force(d, res.phi, big, tol=np.inf))
    assert np.all(e2.weight <= e.weight)
    assert np.allclose(e.weight, np.minimum(d.patch_diameter / np.sqrt(GC * EPS), e.alpha ** -0.5))


# ----------------------------------------------------------------------
# energy norm
# ----------------------------------------------------------------------
def test_energy_norm_examples():
    d = DofSystem(square(2))
    co = unloaded_coefficients(d, _mat(), np.ones(d.n_dofs))
    assert energy_norm(d, np.ones(d.n_dofs), co) == pytest.approx(np.sqrt(GC / EPS), rel=1e-14)
    assert energy_norm(d, np.zeros(d.n_dofs), co) == 0.0
    hat = np.zeros(d.n_dofs)
    hat[vertex_dof(d, 0.5, 0.5)] = 1.0
    expected = np.sqrt(GC * EPS * 8 / 3 + GC / EPS / 9)
    assert energy_norm(d, hat, co) == pytest.approx(expected, rel=1e-13)


# ----------------------------------------------------------------------
# Galerkin functional
# ----------------------------------------------------------------------
def test_galerkin_orthogonality_without_contact():
    d = DofSystem(square(4))
    co = coeffs_from(d, lambda x, y: GC / EPS * (2 + x), np.ones(d.n_dofs))
    res = solve_vi(d, co)
    cls = classify_contact(d, res.phi, co)
    f = constraining_force(d, res.phi, co)
    psi = np.random.default_rng(0).normal(size=d.n_dofs)
    direct, rep = galerkin_functional_check(d, res.phi, co, cls, f, psi)
    assert abs(direct) <= 1e-10 * GC / EPS
    assert abs(rep) <= 1e-10 * GC / EPS


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_galerkin_dual_path(seed):
    d, co, p = single_contact(8)
    res = solve_vi(d, co)
    cls = classify_contact(d, res.phi, co)
    f = constraining_force(d, res.phi, co)
    direct, rep = galerkin_functional_check(d, res.phi, co, cls, f, np.ones(d.n_dofs))
    assert abs(direct - rep) <= 1e-9 * GC / EPS
    rng = np.random.default_rng(seed)
    fine = d.mesh.refine_uniform().refine(rng.choice(4 * d.mesh.n_cells, 20, replace=False))
    fd = DofSystem(fine)
    psi = rng.normal(size=fd.n_dofs)
    direct, rep = galerkin_functional_check(d, res.phi, co, cls, f, psi, fd)
    assert abs(direct - rep) <= 1e-9 * GC / EPS
