"""Benchmarks, time stepping, adaptive reruns and the error studies."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import oracle
from .elasticity import (DisplacementBC, MaterialParams, degradation, degraded_stress, ddot,
                         elastic_stress, estimate_u, solve_displacement, stress_split,
                         sym_grad)
from .fespace import DofSystem, SolverError, interpolate_nodal
from .mesh import QuadMesh, build_initial_mesh
from .phasefield import (FULL_CONTACT, SEMI_CONTACT, VICoefficients, build_coefficients,
                         classify_contact, constraining_force, estimate_phi, solve_vi)

log = logging.getLogger(__name__)

BENCHMARKS = ("tension", "shear", "lshape")
ESTIMATORS = ("phi-only", "phi-plus-u", "standard-nonrobust")
DOMAIN = {"tension": "unit-square", "shear": "unit-square", "lshape": "l-shape"}

# slit on y = 0.5 starting at this x and running to the right boundary
SLIT_START = {"tension": 0.25, "shear": 0.5}
# pushed segment of the L-shape
PUSH_Y, PUSH_X = 250.0, (470.0, 500.0)

# time index of the convergence and efficiency figures
FIGURE_STEP = {"tension": 280, "shear": 107, "lshape": 200}
DESK_FACTOR = 5
# desk runs with the larger time step need a few more steps for the tension
# crack to reach the left boundary
DESK_STEPS = {"tension": 75}


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


@dataclass
class BenchmarkConfig:
    benchmark: str
    mu: float
    lam: float
    gc: float
    kappa: float
    eps: float
    tau: float
    steps: int
    h0: float
    stages: int = 0
    theta: float = 0.5
    estimator: str = "phi-only"
    splitting: bool = False
    out_dir: str = "out"
    eval_step: int | None = None
    eps_sweep: tuple = ()

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.steps < 0 or self.stages < 0:
            raise ConfigError("steps and stages must be non-negative")
        if self.h0 <= 0 or self.tau < 0:
            raise ConfigError("h0 must be positive and tau non-negative")
        if not self.theta > 0:
            raise ConfigError("theta must be positive")
        try:
            self.material
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def material(self):
        return MaterialParams(self.mu, self.lam, self.gc, self.kappa, self.eps)

    @property
    def domain(self):
        return DOMAIN[self.benchmark]

    @property
    def time_index(self):
        return self.eval_step if self.eval_step is not None else min(self.steps, FIGURE_STEP[self.benchmark])

    @classmethod
    def paper(cls, benchmark, **kw):
        """Parameters of the published experiments."""
        if benchmark in ("tension", "shear"):
            base = dict(mu=80.77, lam=121.15, gc=2.7e-3, kappa=1e-8, eps=0.088, h0=0.044)
            if benchmark == "tension":
                base.update(tau=1e-5, steps=330, splitting=False)
            else:
                base.update(tau=1e-4, steps=140, splitting=True)
        elif benchmark == "lshape":
            base = dict(mu=10.95, lam=6.16, gc=8.9e-5, kappa=1e-8, eps=20.0, h0=17.67,
                        tau=1e-3, steps=300, splitting=True)
        else:
            raise ConfigError(f"unknown benchmark {benchmark!r}")
        base["eval_step"] = FIGURE_STEP[benchmark]
        base.update(kw)
        return cls(benchmark=benchmark, **base)

    @classmethod
    def desk(cls, benchmark, **kw):
        """Reduced preset: time step five times larger, five times fewer steps."""
        base = {"steps": DESK_STEPS[benchmark]} if benchmark in DESK_STEPS else {}
        base.update(kw)
        return cls.paper(benchmark).scaled(DESK_FACTOR, **base)

    def scaled(self, factor, **kw):
        """Same loading path with ``factor`` times larger time steps."""
        ev = None if self.eval_step is None else max(1, round(self.eval_step / factor))
        base = dict(tau=self.tau * factor, steps=max(1, round(self.steps / factor)), eval_step=ev)
        base.update(kw)
        return replace(self, **base)


# ----------------------------------------------------------------------
# config files
# ----------------------------------------------------------------------
_KEYS = {
    "benchmark": str, "mu": float, "lambda": float, "gc": float, "kappa": float,
    "eps": float, "tau": float, "steps": int, "h0": float, "stages": int,
    "theta": float, "estimator": str, "splitting": "bool", "out_dir": str,
    "eval_step": int, "eps_sweep": "floats",
}
REQUIRED = ("benchmark", "mu", "lambda", "gc", "kappa", "eps", "tau", "steps", "h0")


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


PRESETS = ("desk", "paper")


def parse_config(text, source="<config>", preset=None):
    """Parse flat ``key = value`` text into a ``BenchmarkConfig``.

    Without a preset every key in ``REQUIRED`` must be present.  With
    ``preset`` only ``benchmark`` is required: missing keys take the
    published values, and ``desk`` then scales the time step up and the
    step count down unless they were given.
    """
    if preset not in (None,) + PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kind = _KEYS[key]
        try:
            if kind == "bool":
                values[key] = _parse_bool(val)
            elif kind == "floats":
                values[key] = _parse_floats(val)
            else:
                values[key] = kind(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    for key in REQUIRED if preset is None else ("benchmark",):
        if key not in values:
            raise ConfigError(f"{source}: missing required key {key!r}")
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    if preset is None:
        if "splitting" not in values:
            values["splitting"] = values["benchmark"] in ("shear", "lshape")
        return BenchmarkConfig(**values)
    bench = values.pop("benchmark")
    if bench not in BENCHMARKS:
        raise ConfigError(f"{source}: unknown benchmark {bench!r}")
    cfg = BenchmarkConfig.paper(bench, **values)
    if preset == "desk":
        # keys given explicitly are not scaled
        kw = {k: values[k] for k in ("tau", "steps", "eval_step") if k in values}
        if "steps" not in values and bench in DESK_STEPS:
            kw["steps"] = DESK_STEPS[bench]
        cfg = cfg.scaled(DESK_FACTOR, **kw)
    return cfg


def load_config(path, preset=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path), preset)


def format_config(cfg: BenchmarkConfig):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None or (isinstance(v, tuple) and not v):
            continue
        key = "lambda" if f.name == "lam" else f.name
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(float(v))
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# benchmark geometry
# ----------------------------------------------------------------------
def initial_mesh(cfg: BenchmarkConfig) -> QuadMesh:
    return build_initial_mesh(cfg.domain, cfg.h0)


def initial_phase_field(benchmark, dofs: DofSystem):
    """Intact material except a zero line of nodes along the slit."""
    phi = np.ones(dofs.n_dofs)
    if benchmark in SLIT_START:
        xy = dofs.coordinates
        tol = 1e-9
        on = (np.abs(xy[:, 1] - 0.5) <= tol) & (xy[:, 0] >= SLIT_START[benchmark] - tol)
        if not on.any():
            # slit line between grid lines: use the nearest grid line below
            ys = np.unique(xy[:, 1])
            y0 = ys[np.argmin(np.abs(ys - 0.5))]
            on = (np.abs(xy[:, 1] - y0) <= tol) & (xy[:, 0] >= SLIT_START[benchmark] - tol)
        phi[on] = 0.0
    elif benchmark != "lshape":
        raise ConfigError(f"unknown benchmark {benchmark!r}")
    return phi


def _pushed(x, y, tol):
    return (np.abs(y - PUSH_Y) <= tol) & (x >= PUSH_X[0] - tol) & (x <= PUSH_X[1] + tol)


def boundary_conditions(cfg: BenchmarkConfig, dofs: DofSystem, n):
    """Displacement boundary data at time step ``n``."""
    m = dofs.mesh
    xy = dofs.coordinates
    nd = dofs.n_dofs
    fixed = np.zeros((nd, 2), dtype=bool)
    values = np.zeros((nd, 2))
    neumann = np.zeros((m.n_sides, 2), dtype=bool)
    bnd = m.side_cells[:, 1] < 0
    mid = m.side_midpoint
    t = n * cfg.tau
    if cfg.benchmark in ("tension", "shear"):
        tol = 1e-9
        top = np.abs(xy[:, 1] - 1.0) <= tol
        bot = np.abs(xy[:, 1]) <= tol
        stop = bnd & (np.abs(mid[:, 1] - 1.0) <= tol)
        sbot = bnd & (np.abs(mid[:, 1]) <= tol)
        sside = bnd & ~stop & ~sbot
        if cfg.benchmark == "tension":
            fixed[top | bot] = True
            values[top, 1] = 2.0 * t
            neumann[sside] = True
        else:
            fixed[top | bot, 0] = True
            values[top, 0] = -t
            vb = np.zeros(m.n_vertices, dtype=bool)
            vb[m.side_vertices[bnd].ravel()] = True
            fixed[vb[dofs.dof_vertex], 1] = True
            neumann[sside, 0] = True
    else:
        tol = 1e-6
        bot = np.abs(xy[:, 1]) <= tol
        push = _pushed(xy[:, 0], xy[:, 1], tol)
        fixed[bot] = True
        fixed[push, 1] = True
        values[push, 1] = t
        sbot = bnd & (np.abs(mid[:, 1]) <= tol)
        spush = bnd & _pushed(mid[:, 0], mid[:, 1], tol)
        neumann[bnd & ~sbot] = True
        neumann[spush, 1] = False
    return DisplacementBC(fixed, values, neumann)


def load_sides(cfg: BenchmarkConfig, mesh: QuadMesh):
    """Boundary sides carrying the load and the loading direction."""
    bnd = mesh.side_cells[:, 1] < 0
    mid = mesh.side_midpoint
    if cfg.benchmark == "tension":
        return bnd & (np.abs(mid[:, 1] - 1.0) <= 1e-9), np.array([0.0, 1.0])
    if cfg.benchmark == "shear":
        return bnd & (np.abs(mid[:, 1] - 1.0) <= 1e-9), np.array([-1.0, 0.0])
    return bnd & _pushed(mid[:, 0], mid[:, 1], 1e-6), np.array([0.0, 1.0])


# ----------------------------------------------------------------------
# time stepping
# ----------------------------------------------------------------------
@dataclass
class StepState:
    n: int
    t: float
    u: np.ndarray
    phi: np.ndarray
    obstacle: np.ndarray
    active: np.ndarray
    classes: np.ndarray
    multiplier: np.ndarray
    complementarity: float
    crack_energy: float
    bulk_energy: float
    load: float
    eta_phi: object = None
    eta_u: object = None
    vi_iterations: int = 0

    def estimator_row(self):
        e, eu = self.eta_phi, self.eta_u
        t1, t2, t3, t4 = e.totals
        u1, u2, u3 = eu.totals
        return [self.n, t1, t2, t3, t4, u1, u2, u3, e.total, eu.total, e.n_semi, e.n_full]


ESTIMATOR_COLUMNS = ["n", "eta1", "eta2", "eta3", "eta4", "etau1", "etau2", "etau3",
                     "eta_phi_total", "eta_u_total", "n_semi", "n_full"]
QUANTITY_COLUMNS = ["n", "t", "crack_energy", "bulk_energy", "load"]


def quantities(cfg: BenchmarkConfig, dofs: DofSystem, u, phi, phi_prev, order=4):
    """Crack energy, bulk energy and load of a converged step.

    The default rule integrates the unsplit bulk density g(phi) sigma:E
    exactly.
    """
    mat = cfg.material
    ref, w = dofs.cell_rule(order)
    ph = dofs.at_quadrature(phi, ref)
    gph = dofs.grad_at_quadrature(phi, ref)
    crack = 0.5 * mat.gc * np.sum(((1.0 - ph) ** 2 / mat.eps + mat.eps * np.sum(gph ** 2, -1)) * w)
    E = sym_grad(dofs.grad_at_quadrature(u, ref))
    g = degradation(ph, mat.kappa)
    if cfg.splitting:
        s = stress_split(E, mat)
        dens = 0.5 * (g * s.driving + ddot(s.sigma_minus, E))
    else:
        dens = 0.5 * g * ddot(elastic_stress(E, mat), E)
    bulk = np.sum(dens * w)
    return float(crack), float(bulk), load(cfg, dofs, u, phi_prev)


def load(cfg: BenchmarkConfig, dofs: DofSystem, u, phi_prev):
    """Resultant of the degraded traction on the loaded boundary part,
    projected on the loading direction."""
    mat = cfg.material
    sides, direction = load_sides(cfg, dofs.mesh)
    if not sides.any():
        return 0.0
    ga, _ = dofs.on_sides(u, gradient=True)
    pa, _ = dofs.on_sides(phi_prev)
    _, ws = dofs.side_quadrature()
    E = sym_grad(ga[sides])
    g = degradation(pa[sides], mat.kappa)
    sig = degraded_stress(E, g, mat, cfg.splitting)
    n = dofs.mesh.side_normal[sides]
    trac = np.einsum("sqij,sj->sqi", sig, n)
    return float(np.sum((trac @ direction) * ws[sides]))


def solve_step(cfg: BenchmarkConfig, dofs: DofSystem, n, phi_prev, u_prev=None, active0=None,
               estimate=True):
    """One staggered step: displacement with the old phase field, then the
    obstacle problem with ``phi <= phi_prev``."""
    mat = cfg.material
    bc = boundary_conditions(cfg, dofs, n)
    u = solve_displacement(dofs, phi_prev, bc, mat, cfg.splitting, u_init=u_prev)
    coeffs = build_coefficients(dofs, u, mat, phi_prev, cfg.splitting)
    res = solve_vi(dofs, coeffs, active0)
    phi = res.phi
    crack, bulk, ld = quantities(cfg, dofs, u, phi, phi_prev)
    classes = classify_contact(dofs, phi, coeffs)
    st = StepState(n, n * cfg.tau, u, phi, phi_prev, res.active, classes, res.multiplier,
                   res.complementarity(phi_prev), crack, bulk, ld, vi_iterations=res.iterations)
    if estimate:
        force = constraining_force(dofs, phi, coeffs, res.system)
        st.eta_phi = estimate_phi(dofs, phi, coeffs, classes, force)
        st.eta_u = estimate_u(dofs, u, phi_prev, mat, bc)
    return st, coeffs


def run_timeline(cfg: BenchmarkConfig, mesh: QuadMesh, steps=None, estimate=True, keep=None,
                 callback=None):
    """Run steps 1..N on a fixed mesh; returns the list of ``StepState``.

    ``keep`` optionally selects which step indices keep their full fields;
    other states drop ``u``/``phi`` arrays to save memory.
    """
    dofs = DofSystem(mesh)
    steps = cfg.steps if steps is None else steps
    phi = initial_phase_field(cfg.benchmark, dofs)
    u = None
    active = None
    states = []
    for n in range(1, steps + 1):
        try:
            st, _ = solve_step(cfg, dofs, n, phi, u, active, estimate)
        except SolverError as exc:
            raise SolverError(f"step {n}: {exc}") from exc
        if callback is not None:
            callback(st, dofs)
        phi, u, active = st.phi, st.u, st.active
        if keep is not None and n not in keep:
            st = replace(st, u=None, obstacle=None, multiplier=None)
        states.append(st)
    return states


# ----------------------------------------------------------------------
# adaptivity
# ----------------------------------------------------------------------
def node_indicator(state: StepState, mode):
    if mode == "phi-only":
        return state.eta_phi.local
    if mode == "standard-nonrobust":
        return state.eta_phi.standard
    a = state.eta_phi.local
    b = state.eta_u.local
    na = np.sqrt(np.sum(a ** 2))
    nb = np.sqrt(np.sum(b ** 2))
    return (a / na if na > 0 else a) + (b / nb if nb > 0 else b)


def dorfler(indicator, theta):
    """Smallest set (by descending sort) with sum of squares >= theta^2 * total."""
    ind = np.asarray(indicator, dtype=float)
    if theta >= 1.0:
        return np.arange(len(ind))
    sq = ind ** 2
    total = sq.sum()
    if total <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-sq, kind="stable")
    cum = np.cumsum(sq[order])
    k = int(np.searchsorted(cum, theta ** 2 * total * (1 - 1e-14))) + 1
    return np.sort(order[:k])


def cells_of_nodes(mesh: QuadMesh, nodes):
    S = mesh.cell_support.tocsc()
    mark = np.zeros(mesh.n_cells, dtype=bool)
    for p in np.asarray(nodes):
        mark[S.indices[S.indptr[p]:S.indptr[p + 1]]] = True
    return np.nonzero(mark)[0]


@dataclass
class Stage:
    index: int
    mesh: QuadMesh
    states: list
    indicator: np.ndarray = None
    marked: np.ndarray = None

    @property
    def n_nodes(self):
        return len(self.mesh.master_vertices)

    def state_at(self, n):
        for s in self.states:
            if s.n == n:
                return s
        raise KeyError(n)


def adaptive_loop(cfg: BenchmarkConfig, mesh=None, steps=None, keep=None, callback=None):
    """Rerun the timeline on successively refined meshes."""
    mesh = initial_mesh(cfg) if mesh is None else mesh
    stages = []
    for k in range(cfg.stages + 1):
        log.info("stage %d: %d cells", k, mesh.n_cells)
        try:
            states = run_timeline(cfg, mesh, steps, keep=keep,
                                  callback=None if callback is None else
                                  (lambda st, d, k=k: callback(k, st, d)))
        except SolverError as exc:
            raise SolverError(f"stage {k}, {exc}") from exc
        st = Stage(k, mesh, states)
        stages.append(st)
        if k == cfg.stages:
            break
        ind = np.zeros(len(mesh.master_vertices))
        for s in states:
            ind = np.maximum(ind, node_indicator(s, cfg.estimator))
        st.indicator = ind
        st.marked = cells_of_nodes(mesh, dorfler(ind, cfg.theta))
        mesh = mesh.refine(st.marked)
    return stages


# ----------------------------------------------------------------------
# studies
# ----------------------------------------------------------------------
MAX_REFERENCE_DOFS = 500_000


@dataclass
class ConvergenceRow:
    series: str
    stage: int
    nodes: int
    err_phi: float
    err_u: float


def convergence_study(cfg: BenchmarkConfig, extra=3, max_dofs=MAX_REFERENCE_DOFS):
    """Adaptive and uniform error series at the figure time index.

    The reference is a full timeline on the uniform refinement of the start
    mesh at (deepest compared level + ``extra``).
    """
    if extra < 3:
        raise ConfigError("reference needs at least three extra refinements")
    n = cfg.time_index
    c = replace(cfg, steps=n)
    stages = adaptive_loop(c, keep={n})
    mesh0 = stages[0].mesh
    uniform = [mesh0.refine_uniform(k) for k in range(cfg.stages + 1)]
    deepest = max(int(s.mesh.cell_level.max()) for s in stages)
    deepest = max(deepest, cfg.stages)
    ref_level = deepest + extra
    nodes = (mesh0.nbx * 2 ** ref_level + 1) * (mesh0.nby * 2 ** ref_level + 1)
    if nodes > max_dofs:
        raise ConfigError(f"reference mesh would have {nodes} phase-field DOFs "
                          f"(limit {max_dofs}); reduce stages or increase h0")
    ref_mesh = mesh0.refine_uniform(ref_level)
    ref = run_timeline(c, ref_mesh, estimate=False, keep={n})[-1]
    ref_dofs = DofSystem(ref_mesh)
    ref_coeffs = build_coefficients(ref_dofs, ref.u, c.material, ref.obstacle, c.splitting)
    rows = []
    for k, st in enumerate(stages):
        s = st.state_at(n)
        e_phi, e_u = _errors(c, DofSystem(st.mesh), s, ref_dofs, ref, ref_coeffs)
        rows.append(ConvergenceRow("adaptive", k, st.n_nodes, e_phi, e_u))
    for k, m in enumerate(uniform):
        s = run_timeline(c, m, estimate=False, keep={n})[-1]
        e_phi, e_u = _errors(c, DofSystem(m), s, ref_dofs, ref, ref_coeffs)
        rows.append(ConvergenceRow("uniform", k, len(m.master_vertices), e_phi, e_u))
    return rows


def _errors(cfg, dofs, state, ref_dofs, ref, ref_coeffs):
    e_phi = oracle.reference_error(state.phi, dofs, ref.phi, ref_dofs, "eps-energy",
                                   coeffs=ref_coeffs)
    e_u = oracle.reference_error(state.u, dofs, ref.u, ref_dofs, "u-energy",
                                 mat=cfg.material, phi=state.phi)
    return e_phi, e_u


def matched_errors(rows, series="adaptive", against="uniform", field_name="err_phi"):
    """Errors of ``against`` interpolated (log-log) at the node counts of ``series``."""
    a = [r for r in rows if r.series == series]
    b = sorted((r for r in rows if r.series == against), key=lambda r: r.nodes)
    bx = np.log([r.nodes for r in b])
    by = np.log([getattr(r, field_name) for r in b])
    out = []
    for r in a:
        x = math.log(r.nodes)
        if len(b) > 1:
            # linear extrapolation beyond the ends of the uniform series
            i = int(np.clip(np.searchsorted(bx, x) - 1, 0, len(bx) - 2))
            y = by[i] + (by[i + 1] - by[i]) * (x - bx[i]) / (bx[i + 1] - bx[i])
        else:
            y = by[0]
        out.append((r.stage, r.nodes, getattr(r, field_name), float(np.exp(y))))
    return out


@dataclass
class EfficiencyRow:
    eps: float
    stage: int
    dofs: int
    eta_phi: float
    err_eps: float
    index_robust: float
    eta_std: float
    err_h1: float
    index_standard: float


def efficiency_study(cfg: BenchmarkConfig, eps_list=None, extra=3, max_dofs=MAX_REFERENCE_DOFS):
    """Efficiency indices of the robust and the standard estimator.

    For every stage mesh the reference is the same obstacle problem of the
    time index (same displacement and obstacle) solved on the stage mesh
    refined ``extra`` times uniformly, which is what the estimators bound.
    """
    if eps_list is None:
        eps_list = cfg.eps_sweep or (cfg.eps,)
    eps_list = list(eps_list)
    n = cfg.time_index
    rows = []
    for eps in eps_list:
        c = replace(cfg, eps=eps, steps=n)
        stages = adaptive_loop(c, keep={n})
        for k, st in enumerate(stages):
            s = st.state_at(n)
            dofs = DofSystem(st.mesh)
            coeffs = build_coefficients(dofs, s.u, c.material, s.obstacle, c.splitting)
            fine = st.mesh.refine_uniform(extra)
            if len(fine.master_vertices) > max_dofs:
                raise ConfigError(f"reference mesh has {len(fine.master_vertices)} nodes "
                                  f"(limit {max_dofs})")
            fdofs = DofSystem(fine)
            fco = oracle.transfer_coefficients(coeffs, fdofs)
            guess = dofs.evaluate(s.phi, fdofs.coordinates)
            ref = solve_vi(fdofs, fco, np.abs(guess - fco.obstacle) <= 1e-12).phi
            e_eps = oracle.reference_error(s.phi, dofs, ref, fdofs, "eps-energy", coeffs=fco)
            e_h1 = oracle.reference_error(s.phi, dofs, ref, fdofs, "h1")
            eta = s.eta_phi.total
            std = s.eta_phi.standard_total
            rows.append(EfficiencyRow(eps, k, dofs.n_dofs, eta, e_eps,
                                      eta / e_eps if e_eps > 0 else math.inf,
                                      std, e_h1, std / e_h1 if e_h1 > 0 else math.inf))
    return rows


# ----------------------------------------------------------------------
# output
# ----------------------------------------------------------------------
def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_run(out_dir, states):
    out_dir = Path(out_dir)
    write_csv(out_dir / "quantities.csv", QUANTITY_COLUMNS,
              [[s.n, s.t, s.crack_energy, s.bulk_energy, s.load] for s in states])
    write_csv(out_dir / "estimator.csv", ESTIMATOR_COLUMNS,
              [s.estimator_row() for s in states if s.eta_phi is not None])
