import dataclasses

import numpy as np
import pytest

from phasefrac.elasticity import estimate_u
from phasefrac.fespace import DofSystem
from phasefrac.mesh import build_initial_mesh
from phasefrac.phasefield import build_coefficients, estimate_phi, solve_vi
from phasefrac.sim import (BenchmarkConfig, ConfigError, ConvergenceRow, adaptive_loop,
                           boundary_conditions, convergence_study, dorfler, format_config,
                           initial_phase_field, load_config, matched_errors, node_indicator,
                           parse_config, quantities, run_timeline, solve_step)

FULL = """
benchmark = tension
mu = 80.77
lambda = 121.15
gc = 2.7e-3
kappa = 1e-8
eps = 0.088
tau = 1e-5
steps = 5
h0 = 0.177   # 8 x 8 cells
"""


def square(n):
    return build_initial_mesh("unit-square", np.sqrt(2) / n)


def small(benchmark="tension", n=8, **kw):
    return BenchmarkConfig.desk(benchmark, h0=np.sqrt(2) / n, **kw)


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
def test_parse_full_config():
    cfg = parse_config(FULL)
    assert cfg.benchmark == "tension" and cfg.steps == 5
    assert cfg.lam == 121.15 and cfg.h0 == 0.177
    assert cfg.splitting is False
    assert cfg.theta == 0.5 and cfg.estimator == "phi-only"


def test_missing_key_named():
    text = FULL.replace("eps = 0.088\n", "")
    with pytest.raises(ConfigError, match="'eps'"):
        parse_config(text)


def test_errors_carry_line_numbers():
    with pytest.raises(ConfigError, match=r":3: unknown key 'colour'"):
        parse_config("benchmark = tension\n\ncolour = red\n")
    with pytest.raises(ConfigError, match=r":2: bad value for 'steps'"):
        parse_config("benchmark = tension\nsteps = many\n", preset="desk")
    with pytest.raises(ConfigError, match=r":1: expected"):
        parse_config("benchmark tension\n")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        parse_config(FULL + "estimator = magic\n")
    with pytest.raises(ConfigError):
        parse_config(FULL.replace("eps = 0.088", "eps = -1"))
    with pytest.raises(ConfigError):
        parse_config(FULL.replace("tension", "bending"))
    with pytest.raises(ConfigError):
        parse_config(FULL, preset="huge")


def test_shear_splits_by_default():
    cfg = parse_config(FULL.replace("tension", "shear"))
    assert cfg.splitting is True
    cfg = parse_config(FULL.replace("tension", "shear") + "splitting = off\n")
    assert cfg.splitting is False


def test_paper_defaults():
    t = BenchmarkConfig.paper("tension")
    assert (t.mu, t.lam, t.gc, t.kappa, t.tau, t.h0) == (80.77, 121.15, 2.7e-3, 1e-8, 1e-5, 0.044)
    s = BenchmarkConfig.paper("shear")
    assert s.tau == 1e-4 and s.splitting
    ls = BenchmarkConfig.paper("lshape")
    assert (ls.mu, ls.lam, ls.gc, ls.tau) == (10.95, 6.16, 8.9e-5, 1e-3)
    assert (t.time_index, s.time_index, ls.time_index) == (280, 107, 200)


def test_presets():
    cfg = parse_config("benchmark = shear\nstages = 2\n", preset="desk")
    assert cfg.tau == pytest.approx(5e-4)
    assert cfg.steps == 28 and cfg.time_index == 21
    assert cfg.stages == 2
    t = parse_config("benchmark = tension\n", preset="desk")
    assert t.steps == 75 and t.time_index == 56
    p = parse_config("benchmark = lshape\neps = 10\n", preset="paper")
    assert p.eps == 10 and p.steps == 300


def test_format_roundtrip(tmp_path):
    cfg = small("shear", stages=1, eps_sweep=(0.088, 0.176))
    path = tmp_path / "c.cfg"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.cfg")


# ----------------------------------------------------------------------
# setup
# ----------------------------------------------------------------------
def test_tension_slit_nodes():
    d = DofSystem(square(32))
    phi = initial_phase_field("tension", d)
    zero = phi == 0
    assert zero.sum() == 25
    assert np.allclose(d.coordinates[zero, 1], 0.5)
    assert d.coordinates[zero, 0].min() == pytest.approx(0.25)


def test_lshape_and_coarse_shear_slit():
    d = DofSystem(build_initial_mesh("l-shape", 120.0))
    assert np.all(initial_phase_field("lshape", d) == 1)
    d2 = DofSystem(square(2))
    phi = initial_phase_field("shear", d2)
    assert np.allclose(d2.coordinates[phi == 0], [[0.5, 0.5], [1.0, 0.5]])


def test_boundary_data():
    cfg = small("tension")
    d = DofSystem(square(8))
    bc = boundary_conditions(cfg, d, 3)
    top = np.abs(d.coordinates[:, 1] - 1) < 1e-12
    assert np.allclose(bc.values[top, 1], 2 * 3 * cfg.tau)
    assert bc.fixed[top].all()
    sh = boundary_conditions(small("shear"), d, 3)
    assert np.allclose(sh.values[top, 0], -3 * small("shear").tau)
    bnd = (np.abs(d.coordinates - 0.5) > 0.5 - 1e-12).any(axis=1)
    assert sh.fixed[bnd, 1].all() and not sh.fixed[~bnd].any()


# ----------------------------------------------------------------------
# quantities
# ----------------------------------------------------------------------
def test_trivial_quantities():
    cfg = small("tension")
    d = DofSystem(square(4))
    zero = np.zeros((d.n_dofs, 2))
    one = np.ones(d.n_dofs)
    assert np.allclose(quantities(cfg, d, zero, one, one), 0.0, rtol=0, atol=1e-15)
    crack, bulk, ld = quantities(cfg, d, zero, 0 * one, one)
    assert crack == pytest.approx(cfg.gc / (2 * cfg.eps), rel=1e-14)
    assert bulk == 0 and ld == 0


@pytest.fixture(scope="module")
def tension_states():
    cfg = small("tension", n=16)
    mesh = square(16)
    return cfg, mesh, run_timeline(cfg, mesh, keep={1, cfg.steps - 1, cfg.steps})


def test_quantities_doubled_quadrature(tension_states):
    cfg, mesh, states = tension_states
    d = DofSystem(mesh)
    s, prev = states[-1], states[-2]
    a = quantities(cfg, d, s.u, s.phi, s.obstacle)
    b = quantities(cfg, d, s.u, s.phi, s.obstacle, order=8)
    assert np.allclose(a, b, rtol=1e-8)
    assert a[1] > 0 and a[2] > 0


def test_single_step_keeps_material_intact(tension_states):
    cfg, mesh, states = tension_states
    d = DofSystem(mesh)
    first = states[0]
    phi0 = initial_phase_field("tension", d)
    assert first.load > 0
    assert not first.active[phi0 > 0].any()
    # the slit relaxes into a diffuse band of width ~eps; beyond 4 eps the
    # material stays intact
    far = np.abs(d.coordinates[:, 1] - 0.5) > 4 * cfg.eps
    assert np.all(first.phi[far] > 0.95)
    assert first.crack_energy <= 1.2 * quantities(cfg, d, 0 * first.u, phi0, phi0)[0]


def test_irreversibility_and_energy_monotone(tension_states):
    cfg, mesh, states = tension_states
    for s in states:
        assert s.complementarity <= 1e-9
    crack = np.array([s.crack_energy for s in states])
    assert np.all(np.diff(crack) >= -1e-8)
    s = states[-1]
    assert np.all(s.phi <= s.obstacle + 1e-12)


def test_phase_field_range(tension_states):
    _, _, states = tension_states
    s = states[-1]
    # fully broken by the last step
    assert s.phi.min() < 0.1
    assert s.phi.max() <= 1 + 1e-12
    # no lower obstacle: Q1 may undershoot zero slightly next to the crack
    assert s.phi.min() >= -0.05


def test_zero_motion_keeps_everything():
    cfg = small("tension", tau=0.0, steps=3)
    states = run_timeline(cfg, square(8))
    d = DofSystem(square(8))
    phi0 = initial_phase_field("tension", d)
    for s in states:
        assert np.all(s.u == 0)
        assert s.bulk_energy == 0 and s.load == 0
    assert states[0].crack_energy == states[-1].crack_energy
    assert np.all(states[-1].phi <= phi0)


def test_estimators_doubled_quadrature(tension_states):
    cfg, mesh, states = tension_states
    d = DofSystem(mesh)
    s = states[-1]
    co = build_coefficients(d, s.u, cfg.material, s.obstacle, cfg.splitting)
    a = estimate_phi(d, s.phi, co, order=4)
    b = estimate_phi(d, s.phi, co, order=8)
    assert a.total > 0 and np.isfinite(a.total)
    assert b.total == pytest.approx(a.total, rel=1e-8)
    bc = boundary_conditions(cfg, d, s.n)
    ua = estimate_u(d, s.u, s.obstacle, cfg.material, bc, order=4)
    ub = estimate_u(d, s.u, s.obstacle, cfg.material, bc, order=8)
    assert ub.total == pytest.approx(ua.total, rel=1e-8)


def test_deterministic_rerun():
    cfg = small("shear", steps=4)
    a = run_timeline(cfg, square(8))
    b = run_timeline(cfg, square(8))
    for x, y in zip(a, b):
        assert np.array_equal(x.phi, y.phi) and np.array_equal(x.u, y.u)
        assert x.estimator_row() == y.estimator_row()
        assert (x.crack_energy, x.bulk_energy, x.load) == (y.crack_energy, y.bulk_energy, y.load)


def test_estimator_totals_compose(tension_states):
    _, _, states = tension_states
    e = states[-1].eta_phi
    parts = e.totals
    assert e.total == pytest.approx(sum(parts), rel=1e-12)
    assert parts[0] == pytest.approx(np.sqrt(np.sum(e.eta1 ** 2)), rel=1e-12)


# ----------------------------------------------------------------------
# marking and stages
# ----------------------------------------------------------------------
def test_dorfler_examples():
    ind = np.array([1.0, 3.0, 2.0, 0.5])
    # squares 1, 9, 4, 0.25; total 14.25
    assert list(dorfler(ind, 0.5)) == [1]
    assert list(dorfler(ind, 0.9)) == [1, 2]
    assert list(dorfler(ind, 1.0)) == [0, 1, 2, 3]
    assert len(dorfler(np.zeros(4), 0.5)) == 0


def test_dorfler_minimal_by_sort():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ind = rng.random(30)
        theta = rng.uniform(0.1, 0.99)
        mark = dorfler(ind, theta)
        sq = ind ** 2
        assert sq[mark].sum() >= theta ** 2 * sq.sum() * (1 - 1e-12)
        rest = np.setdiff1d(np.arange(30), mark)
        assert sq[rest].max(initial=0) <= sq[mark].min()
        # dropping the smallest marked entry breaks the criterion
        assert sq[mark].sum() - sq[mark].min() < theta ** 2 * sq.sum()


def test_theta_one_refines_uniformly():
    cfg = small("tension", n=4, steps=2, stages=1, theta=1.0)
    stages = adaptive_loop(cfg)
    assert stages[1].mesh.n_cells == 4 * stages[0].mesh.n_cells
    assert not stages[1].mesh.hanging.any()


def test_phi_plus_u_indicator_normalised(tension_states):
    _, _, states = tension_states
    s = states[-1]
    ind = node_indicator(s, "phi-plus-u")
    a = s.eta_phi.local / np.linalg.norm(s.eta_phi.local)
    b = s.eta_u.local / np.linalg.norm(s.eta_u.local)
    assert np.allclose(ind, a + b)
    assert np.array_equal(node_indicator(s, "standard-nonrobust"), s.eta_phi.standard)


def test_adaptive_loop_refines_marked():
    cfg = small("tension", n=8, steps=3, stages=2)
    stages = adaptive_loop(cfg)
    assert len(stages) == 3
    for a, b in zip(stages, stages[1:]):
        assert b.mesh.is_refinement_of(a.mesh)
        assert b.mesh.n_cells > a.mesh.n_cells
        assert len(a.marked) > 0


# ----------------------------------------------------------------------
# studies
# ----------------------------------------------------------------------
def test_convergence_guards():
    cfg = small("tension", n=8, steps=2, stages=1, eval_step=2)
    with pytest.raises(ConfigError, match="three"):
        convergence_study(cfg, extra=2)
    with pytest.raises(ConfigError, match="phase-field DOFs"):
        convergence_study(cfg, max_dofs=1000)


def test_matched_errors_loglog():
    rows = [ConvergenceRow("uniform", 0, 100, 1.0, 0.0),
            ConvergenceRow("uniform", 1, 400, 0.5, 0.0),
            ConvergenceRow("adaptive", 1, 200, 0.6, 0.0)]
    (stage, nodes, err, uni), = matched_errors(rows)
    assert (stage, nodes, err) == (1, 200, 0.6)
    assert uni == pytest.approx(2 ** -0.5)


def test_self_comparison_is_zero(tension_states):
    from phasefrac import oracle
    cfg, mesh, states = tension_states
    d = DofSystem(mesh)
    s = states[-1]
    co = build_coefficients(d, s.u, cfg.material, s.obstacle, cfg.splitting)
    assert oracle.reference_error(s.phi, d, s.phi, d, "eps-energy", coeffs=co) == 0.0
