"""Time integration, the manufactured solution, error norms, experiment
pipelines and structural diagnostics.

The transient solver advances the coupled system with Crank-Nicolson steps.
Because the elasticity equation is static at every time level, the averaged
displacement row is scaled by two, which makes the step operator equal the
symmetric block operator assembled in :mod:`biotfem.forms`; only the
right-hand side carries the previous time level.

The manufactured solution is a divergence-carrying displacement field and a
polynomial pressure, both vanishing (with their gradients) on the boundary
of the unit square:

    u = (-pi x^2 (1-x)^2 sin^2(pi y) cos 2t,  -pi y^2 (1-y)^2 sin^2(pi x) cos 2t)
    p = x (1-x) y (1-y) cos t

The loads below were derived symbolically once and are hard coded; the test
suite validates every stored derivative against finite differences of u and
p, and the stored f, g against the strong equations evaluated with the
stored derivatives.
"""

import csv
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .elements import DofHandler, ElementTable, edge_quadrature
from .errors import ConfigurationError
from .forms import (
    AssembledForms,
    ModelParams,
    assemble_forms,
    assemble_load_displacement,
    assemble_load_pressure,
    assemble_preconditioner,
    assemble_pressure_norm,
    assemble_projection_rhs,
    assemble_system,
    _tri_quad_points,
)
from .mesh import build_structured_mesh, classify_boundary
from .solver import (
    BlockDiagPreconditioner,
    NotConvergedError,
    SolveReport,
    SpdFactorization,
    minres,
)

PI = np.pi


# ---------------------------------------------------------------------------
# exact solution
# ---------------------------------------------------------------------------

@dataclass
class ExactSolution:
    """Closed-form solution fields and the loads they induce.

    All callables take ``(points, t)`` with points of shape (n, 2) and
    return arrays with leading dimension n.
    """

    u: callable
    p: callable
    grad_u: callable
    div_u: callable
    grad_p: callable
    dp_dt: callable
    ddiv_u_dt: callable
    f: callable
    g: callable


def manufactured_solution(params):
    """Manufactured displacement/pressure pair and the induced loads."""
    mu, lam, alpha = params.mu, params.lam, params.alpha
    kap = params.kappa_matrix()
    k11, k12, k22 = kap[0, 0], kap[0, 1], kap[1, 1]

    def bump(x):        # x^2 (1-x)^2
        return x * x * (1.0 - x) ** 2

    def dbump(x):
        return 2.0 * x - 6.0 * x**2 + 4.0 * x**3

    def ddbump(x):
        return 2.0 - 12.0 * x + 12.0 * x**2

    def par(x):         # x (1-x)
        return x * (1.0 - x)

    def dpar(x):
        return 1.0 - 2.0 * x

    def split(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts[:, 0], pts[:, 1]

    def u(pts, t):
        x, y = split(pts)
        c = np.cos(2.0 * t)
        return np.stack(
            [-PI * bump(x) * np.sin(PI * y) ** 2 * c,
             -PI * bump(y) * np.sin(PI * x) ** 2 * c], axis=-1
        )

    def grad_u(pts, t):
        x, y = split(pts)
        c = np.cos(2.0 * t)
        out = np.empty((len(x), 2, 2))
        out[:, 0, 0] = -PI * dbump(x) * np.sin(PI * y) ** 2 * c
        out[:, 0, 1] = -PI**2 * bump(x) * np.sin(2.0 * PI * y) * c
        out[:, 1, 0] = -PI**2 * bump(y) * np.sin(2.0 * PI * x) * c
        out[:, 1, 1] = -PI * dbump(y) * np.sin(PI * x) ** 2 * c
        return out

    def div_u(pts, t):
        x, y = split(pts)
        c = np.cos(2.0 * t)
        return -PI * c * (dbump(x) * np.sin(PI * y) ** 2 + dbump(y) * np.sin(PI * x) ** 2)

    def ddiv_u_dt(pts, t):
        x, y = split(pts)
        return 2.0 * PI * np.sin(2.0 * t) * (
            dbump(x) * np.sin(PI * y) ** 2 + dbump(y) * np.sin(PI * x) ** 2
        )

    def p(pts, t):
        x, y = split(pts)
        return par(x) * par(y) * np.cos(t)

    def dp_dt(pts, t):
        x, y = split(pts)
        return -par(x) * par(y) * np.sin(t)

    def grad_p(pts, t):
        x, y = split(pts)
        c = np.cos(t)
        return np.stack([dpar(x) * par(y) * c, par(x) * dpar(y) * c], axis=-1)

    def f(pts, t):
        # f = -mu lap(u) - (mu + lam) grad(div u) + alpha grad(p)
        x, y = split(pts)
        c = np.cos(2.0 * t)
        ct = np.cos(t)
        sx2 = np.sin(PI * x) ** 2
        sy2 = np.sin(PI * y) ** 2
        f1 = PI * c * (
            mu * (ddbump(x) * sy2 + 2.0 * PI**2 * bump(x) * np.cos(2.0 * PI * y))
            + (mu + lam) * (ddbump(x) * sy2 + PI * dbump(y) * np.sin(2.0 * PI * x))
        ) + alpha * ct * dpar(x) * par(y)
        f2 = PI * c * (
            mu * (ddbump(y) * sx2 + 2.0 * PI**2 * bump(y) * np.cos(2.0 * PI * x))
            + (mu + lam) * (ddbump(y) * sx2 + PI * dbump(x) * np.sin(2.0 * PI * y))
        ) + alpha * ct * par(x) * dpar(y)
        return np.stack([f1, f2], axis=-1)

    def g(pts, t):
        # g = s0 dp/dt + alpha d(div u)/dt - div(kappa grad p)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x, y = split(pts)
        ct = np.cos(t)
        p_xx = -2.0 * par(y) * ct
        p_yy = -2.0 * par(x) * ct
        p_xy = dpar(x) * dpar(y) * ct
        flux = k11 * p_xx + 2.0 * k12 * p_xy + k22 * p_yy
        return params.eval_s0(pts) * dp_dt(pts, t) + alpha * ddiv_u_dt(pts, t) - flux

    return ExactSolution(u, p, grad_u, div_u, grad_p, dp_dt, ddiv_u_dt, f, g)


def zero_solution():
    """Identically zero solution (zero loads); handy for fixed-point tests."""

    def zeros_like(shape_tail):
        def fn(pts, t):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            return np.zeros((pts.shape[0],) + shape_tail)
        return fn

    return ExactSolution(
        u=zeros_like((2,)), p=zeros_like(()), grad_u=zeros_like((2, 2)),
        div_u=zeros_like(()), grad_p=zeros_like((2,)), dp_dt=zeros_like(()),
        ddiv_u_dt=zeros_like(()), f=zeros_like((2,)), g=zeros_like(()),
    )


# ---------------------------------------------------------------------------
# problem bundle
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    """Everything assembled for one (params, mesh) configuration."""

    params: ModelParams
    n: int
    mesh: object
    tags: object
    dofs: DofHandler
    table: ElementTable
    forms: AssembledForms
    system: sp.csr_matrix
    p_v: sp.csr_matrix
    p_q: sp.csr_matrix
    pv_fact: SpdFactorization
    pqc_fact: SpdFactorization
    pq0_fact: SpdFactorization
    precond: BlockDiagPreconditioner

    @property
    def num_dofs(self):
        return self.dofs.num_total

    def split(self, x):
        return x[: self.dofs.num_u], x[self.dofs.num_u :]


def build_problem(params, n, gamma_d="x=0", gamma_p="all", check_coercivity=True):
    """Assemble mesh, forms, step operator and preconditioner factorizations."""
    mesh = build_structured_mesh(n)
    tags = classify_boundary(mesh, gamma_d, gamma_p)
    dofs = DofHandler(mesh, tags)
    table = ElementTable(mesh)
    forms = assemble_forms(mesh, dofs, params, table)
    system = assemble_system(forms, params)
    p_v, p_q = assemble_preconditioner(mesh, dofs, params, forms, table)
    nv = dofs.num_pc
    pv_fact = SpdFactorization(p_v, "displacement preconditioner block")
    pqc_fact = SpdFactorization(p_q[:nv, :nv].tocsc(), "continuous pressure block")
    pq0_fact = SpdFactorization(p_q[nv:, nv:].tocsc(), "cell pressure block")
    precond = BlockDiagPreconditioner(pv_fact, pqc_fact, pq0_fact)

    if check_coercivity:
        ratio = coercivity_ratio(mesh, dofs, params, forms, n_samples=20, seed=1)
        if ratio < 0.1:
            warnings.warn(
                f"pressure form may not be coercive: min Rayleigh quotient "
                f"{ratio:.3e} against the discrete pressure norm (gamma too small?)",
                RuntimeWarning,
                stacklevel=2,
            )

    return Problem(
        params, n, mesh, tags, dofs, table, forms, system,
        p_v, p_q, pv_fact, pqc_fact, pq0_fact, precond,
    )


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

@dataclass
class StepState:
    """Solution coefficients at one time level."""

    t: float
    u: np.ndarray
    p: np.ndarray
    report: SolveReport | None = None


def _loads(problem, exact, t):
    lf = assemble_load_displacement(problem.mesh, problem.dofs, exact.f, t, problem.table)
    lg = assemble_load_pressure(problem.mesh, problem.dofs, exact.g, t, problem.table)
    return lf, lg


def solve_pressure_spd(matrix, rhs, dofs, label=""):
    """Solve a pressure operator that is SPD up to the representation kernel.

    Function-level pressure operators annihilate the redundancy vector, so
    the raw matrix is singular by exactly one dimension.  Pinning the last
    cell coefficient to zero makes the reduced matrix SPD, and consistency
    of the load makes the dropped equation hold automatically.
    """
    keep = np.arange(dofs.num_p - 1)
    reduced = matrix[keep][:, keep].tocsc()
    fact = SpdFactorization(reduced, label)
    out = np.zeros(dofs.num_p)
    out[:-1] = fact.solve(rhs[:-1])
    return out


def initial_data(problem, exact, pressure_projection="elliptic"):
    """Compatible discrete initial data.

    The initial pressure is the elliptic projection of the exact initial
    pressure (an L2 projection is available via ``pressure_projection="l2"``);
    the initial displacement then solves the static elasticity row against
    the initial load, so the compatibility equation holds to solver accuracy.
    """
    mesh, dofs, params = problem.mesh, problem.dofs, problem.params
    if pressure_projection == "elliptic":
        rhs = assemble_projection_rhs(
            mesh, dofs, params, exact.p, exact.grad_p, 0.0, problem.table
        )
        try:
            p0 = solve_pressure_spd(problem.forms.pressure, rhs, dofs, "pressure form")
        except Exception as exc:
            raise ConfigurationError(
                f"pressure form is not invertible for the initial projection: {exc}"
            ) from exc
    elif pressure_projection == "l2":
        rule = problem.table.rule
        pts, wts = _tri_quad_points(mesh, rule)
        phi = np.hstack([rule.points, np.ones((len(rule.weights), 1))])
        from .forms import _Triplets, _symmetrize

        trip = _Triplets()
        local = np.einsum("tq,qi,qj->tij", wts, phi, phi)
        pdofs = np.hstack(
            [mesh.triangles, (dofs.num_pc + np.arange(mesh.num_triangles))[:, None]]
        )
        trip.add(pdofs[:, :, None], pdofs[:, None, :], local)
        mass = _symmetrize(trip.build(dofs.num_p, dofs.num_p))
        rhs = assemble_load_pressure(mesh, dofs, exact.p, 0.0, problem.table)
        p0 = solve_pressure_spd(mass, rhs, dofs, "pressure mass")
    else:
        raise ConfigurationError(f"unknown pressure projection {pressure_projection!r}")

    lf0 = assemble_load_displacement(mesh, dofs, exact.f, 0.0, problem.table)
    u0 = problem.pv_fact.solve(lf0 - problem.forms.coupling.T @ p0)
    return StepState(0.0, u0, p0, None)


def compatibility_residual(problem, state, exact):
    """Relative residual of the static displacement row at the state's time."""
    lf = assemble_load_displacement(
        problem.mesh, problem.dofs, exact.f, state.t, problem.table
    )
    r = problem.forms.elasticity @ state.u + problem.forms.coupling.T @ state.p - lf
    scale = max(np.linalg.norm(lf), 1e-300)
    return np.linalg.norm(r) / scale


def cn_rhs(problem, state, loads_n, loads_np1):
    """Right-hand side of one Crank-Nicolson step from the given state."""
    forms, params = problem.forms, problem.params
    lf_n, lg_n = loads_n
    lf_np1, lg_np1 = loads_np1
    rhs_u = lf_n + lf_np1 - forms.elasticity @ state.u - forms.coupling.T @ state.p
    rhs_p = (
        -0.5 * params.dt * (lg_n + lg_np1)
        + forms.coupling @ state.u
        - (forms.storage_mass + forms.stabilization) @ state.p
        + 0.5 * params.dt * (forms.pressure @ state.p)
    )
    return np.concatenate([rhs_u, rhs_p])


def cn_step(problem, state, loads_n, loads_np1, rtol=1e-8, maxit=1000, x0=None):
    """Advance one Crank-Nicolson step by preconditioned MinRes."""
    rhs = cn_rhs(problem, state, loads_n, loads_np1)
    a = problem.system

    x, report = minres(
        lambda v: a @ v, problem.precond, rhs, rtol=rtol, maxit=maxit, x0=x0
    )
    u, p = problem.split(x)
    return StepState(state.t + problem.params.dt, u, p, report)


def num_steps(params):
    """Number of Crank-Nicolson steps covering [0, T]; warns on rounding."""
    ratio = params.T / params.dt
    n = max(1, round(ratio))
    if abs(ratio - n) > 1e-9 * max(1.0, ratio):
        warnings.warn(
            f"T/dt = {ratio:.6g} is not an integer; running {n} steps",
            RuntimeWarning,
            stacklevel=2,
        )
    return n


def run_transient(problem, exact, rtol=1e-8, maxit=1000, warm_start=True, on_step=None):
    """Run the full Crank-Nicolson sweep from compatible initial data.

    Returns ``(final_state, reports)``.  ``on_step(k, prev, new, loads_prev,
    loads_new)`` is invoked after every accepted step.  With ``warm_start``
    each solve starts from the previous solution, which changes iteration
    counts but not converged solutions.
    """
    params = problem.params
    steps = num_steps(params)
    state = initial_data(problem, exact)
    loads = _loads(problem, exact, 0.0)
    reports = []
    x_prev = None
    for k in range(steps):
        t_next = (k + 1) * params.dt
        loads_next = _loads(problem, exact, t_next)
        x0 = x_prev if warm_start else None
        new_state = cn_step(problem, state, loads, loads_next, rtol, maxit, x0)
        reports.append(new_state.report)
        if on_step is not None:
            on_step(k, state, new_state, loads, loads_next)
        x_prev = np.concatenate([new_state.u, new_state.p])
        state = new_state
        loads = loads_next
    return state, reports


def pressure_row_residuals(problem, state_prev, state_new, loads_prev, loads_new):
    """Per-cell residual of the flow row tested with cell indicators.

    Returns ``(residuals, scales)`` over cells.  The scale of a cell is the
    largest magnitude among the terms entering its balance, floored at the
    largest such magnitude over the whole mesh: a tolerance-level global
    residual cannot promise more on cells with vanishing local activity.
    """
    forms, params = problem.forms, problem.params
    nv = problem.dofs.num_pc
    rhs = cn_rhs(problem, state_prev, loads_prev, loads_new)
    rhs_p = rhs[problem.dofs.num_u :]
    m_p = forms.storage_mass + forms.stabilization + 0.5 * params.dt * forms.pressure
    flow = forms.coupling @ state_new.u
    store = m_p @ state_new.p
    resid = rhs_p - (flow - store)
    cells = slice(nv, None)
    terms = np.stack([np.abs(rhs_p[cells]), np.abs(flow[cells]), np.abs(store[cells])])
    scales = terms.max(axis=0)
    floor = max(float(scales.max()), 1e-300)
    return np.abs(resid[cells]), np.maximum(scales, floor)


def discrete_energy(problem, state):
    """a_u(u, u) + (s0 p, p) + S(p, p); non-increasing without sources."""
    forms = problem.forms
    return float(
        state.u @ (forms.elasticity @ state.u)
        + state.p @ ((forms.storage_mass + forms.stabilization) @ state.p)
    )


# ---------------------------------------------------------------------------
# error norms
# ---------------------------------------------------------------------------

@dataclass
class ErrorResult:
    """Relative errors at the final time (absolute where the exact norm
    vanishes; those entries are listed in ``absolute_fallback``)."""

    u_energy: float
    u_h1: float
    u_l2: float
    p_h1: float
    p_l2: float
    absolute_fallback: tuple = ()

    def as_tuple(self):
        return (self.u_energy, self.u_h1, self.u_l2, self.p_h1, self.p_l2)


def compute_errors(problem, state, exact):
    """Relative errors of a state against the exact solution at its time."""
    mesh, dofs, table, params = problem.mesh, problem.dofs, problem.table, problem.params
    mu, lam = params.mu, params.lam
    t = state.t
    nv = dofs.num_pc

    num = np.zeros(5)   # energy-u, h1-u, l2-u, h1-p, l2-p
    den = np.zeros(5)

    pc = state.p[:nv]
    p0 = state.p[nv:]
    hat_grads = table.hat_grads

    for cid, cls in enumerate(table.classes):
        tris = table.class_tris[cid]
        if len(tris) == 0:
            continue
        pts = table.quad_points(tris, cls)      # (m, nq, 2)
        flat = pts.reshape(-1, 2)
        w = cls["weights"]                       # (nq,) physical weights

        coeffs = np.where(
            dofs.tri_u_dofs[tris] >= 0,
            state.u[np.clip(dofs.tri_u_dofs[tris], 0, None)],
            0.0,
        )
        uh = np.einsum("mj,qjc->mqc", coeffs, cls["phi"])
        gh = np.einsum("mj,qjcd->mqcd", coeffs, cls["grad"])

        uex = np.asarray(exact.u(flat, t)).reshape(pts.shape)
        gex = np.asarray(exact.grad_u(flat, t)).reshape(pts.shape[:2] + (2, 2))

        du = uex - uh
        dg = gex - gh
        e_xx = dg[..., 0, 0]
        e_yy = dg[..., 1, 1]
        e_xy = 0.5 * (dg[..., 0, 1] + dg[..., 1, 0])
        ddiv = dg[..., 0, 0] + dg[..., 1, 1]
        num[0] += np.einsum(
            "mq,q->", 2 * mu * (e_xx**2 + e_yy**2 + 2 * e_xy**2) + lam * ddiv**2, w
        )
        num[1] += np.einsum("mqcd,mqcd,q->", dg, dg, w) + np.einsum(
            "mqc,mqc,q->", du, du, w
        )
        num[2] += np.einsum("mqc,mqc,q->", du, du, w)

        ex_xx = gex[..., 0, 0]
        ex_yy = gex[..., 1, 1]
        ex_xy = 0.5 * (gex[..., 0, 1] + gex[..., 1, 0])
        exdiv = gex[..., 0, 0] + gex[..., 1, 1]
        den[0] += np.einsum(
            "mq,q->", 2 * mu * (ex_xx**2 + ex_yy**2 + 2 * ex_xy**2) + lam * exdiv**2, w
        )
        den[1] += np.einsum("mqcd,mqcd,q->", gex, gex, w) + np.einsum(
            "mqc,mqc,q->", uex, uex, w
        )
        den[2] += np.einsum("mqc,mqc,q->", uex, uex, w)

        ph = np.einsum("mi,qi->mq", pc[mesh.triangles[tris]], table.hats_ref) + p0[tris][:, None]
        gph = np.einsum("mi,mia->ma", pc[mesh.triangles[tris]], hat_grads[tris])
        pex = np.asarray(exact.p(flat, t)).reshape(pts.shape[:2])
        gpex = np.asarray(exact.grad_p(flat, t)).reshape(pts.shape)

        dp = pex - ph
        dgp = gpex - gph[:, None, :]
        num[3] += np.einsum("mqa,mqa,q->", dgp, dgp, w) + np.einsum("mq,mq,q->", dp, dp, w)
        num[4] += np.einsum("mq,mq,q->", dp, dp, w)
        den[3] += np.einsum("mqa,mqa,q->", gpex, gpex, w) + np.einsum(
            "mq,mq,q->", pex, pex, w
        )
        den[4] += np.einsum("mq,mq,q->", pex, pex, w)

    num = np.sqrt(num)
    den = np.sqrt(den)
    names = ("u_energy", "u_h1", "u_l2", "p_h1", "p_l2")
    fallback = []
    rel = np.empty(5)
    for i, name in enumerate(names):
        if den[i] < 1e-14:
            rel[i] = num[i]
            fallback.append(name)
        else:
            rel[i] = num[i] / den[i]
    return ErrorResult(*rel, absolute_fallback=tuple(fallback))


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def _fmt(x):
    return f"{x:.5e}"


@dataclass
class ErrorTable:
    """Rows of the convergence study with log2 rates between mesh levels."""

    rows: list = field(default_factory=list)

    COLUMNS = (
        "beta", "nu", "N", "dt",
        "err_u_energy", "rate", "err_u_h1", "rate", "err_u_l2", "rate",
        "err_p_h1", "rate", "err_p_l2", "rate",
    )

    def add(self, beta, nu, n, dt, errors, rates):
        self.rows.append(
            {"beta": beta, "nu": nu, "N": n, "dt": dt,
             "errors": tuple(errors), "rates": tuple(rates)}
        )

    def series(self, beta, nu):
        return [r for r in self.rows if r["beta"] == beta and r["nu"] == nu]

    def to_csv(self, stream):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            line = [str(r["beta"]), _fmt(r["nu"]), str(r["N"]), _fmt(r["dt"])]
            for e, rate in zip(r["errors"], r["rates"]):
                line.append(_fmt(e))
                line.append("" if rate is None else _fmt(rate))
            writer.writerow(line)

    def rate_violations(self, first_order=(0.9, 1.1), second_order=(1.8, 2.1)):
        """Rates outside the expected bands; empty when all rates comply."""
        bands = (first_order, first_order, second_order, first_order, second_order)
        names = ("u_energy", "u_h1", "u_l2", "p_h1", "p_l2")
        bad = []
        for r in self.rows:
            for name, band, rate in zip(names, bands, r["rates"]):
                if rate is None:
                    continue
                if not band[0] <= rate <= band[1]:
                    bad.append(
                        f"beta={r['beta']} nu={r['nu']} N={r['N']}: {name} rate "
                        f"{rate:.3f} outside [{band[0]}, {band[1]}]"
                    )
        return bad


@dataclass
class IterTable:
    """Iteration counts of the preconditioning study."""

    rows: list = field(default_factory=list)

    COLUMNS = (
        "beta", "dt", "nu", "N", "dofs",
        "iters_first", "iters_max", "iters_mean", "converged",
    )

    def add(self, beta, dt, nu, n, dofs, first, worst, mean, converged):
        self.rows.append(
            {"beta": beta, "dt": dt, "nu": nu, "N": n, "dofs": dofs,
             "iters_first": first, "iters_max": worst, "iters_mean": mean,
             "converged": converged}
        )

    def series(self, beta, dt, nu):
        return [
            r for r in self.rows
            if r["beta"] == beta and r["dt"] == dt and r["nu"] == nu
        ]

    def to_csv(self, stream):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self.rows:
            writer.writerow(
                [str(r["beta"]), _fmt(r["dt"]), _fmt(r["nu"]), str(r["N"]),
                 str(r["dofs"]), str(r["iters_first"]), str(r["iters_max"]),
                 _fmt(r["iters_mean"]), "true" if r["converged"] else "false"]
            )

    def trend_violations(self, bound=150, spread=0.25):
        """Robustness assertions for the over-stabilized configurations.

        For beta >= 1 every converged count must stay below ``bound``; for
        beta = 2 the counts across mesh levels at fixed (dt, nu) must stay
        within ``spread`` of their minimum.
        """
        bad = []
        for r in self.rows:
            if r["beta"] >= 1 and r["iters_first"] > bound:
                bad.append(
                    f"beta={r['beta']} dt={r['dt']} nu={r['nu']} N={r['N']}: "
                    f"{r['iters_first']} iterations exceed {bound}"
                )
            if not r["converged"]:
                bad.append(
                    f"beta={r['beta']} dt={r['dt']} nu={r['nu']} N={r['N']}: "
                    "not converged"
                )
        seen = set()
        for r in self.rows:
            key = (r["beta"], r["dt"], r["nu"])
            if r["beta"] != 2 or key in seen:
                continue
            seen.add(key)
            counts = [s["iters_first"] for s in self.series(*key)]
            if len(counts) >= 2:
                lo, hi = min(counts), max(counts)
                if hi > lo * (1.0 + spread):
                    bad.append(
                        f"beta=2 dt={r['dt']} nu={r['nu']}: counts {counts} vary "
                        f"more than {spread:.0%}"
                    )
        return bad


def convergence_study(base_params, n_list, beta_list, nu_list,
                      gamma_d="x=0", gamma_p="all", rtol=1e-8, maxit=1000,
                      warm_start=True, progress=None):
    """Transient manufactured-solution runs over (beta, nu, N) with dt = 1/N."""
    table = ErrorTable()
    for beta in beta_list:
        for nu in nu_list:
            prev = None
            for n in n_list:
                params = replace(base_params, beta=beta, nu=nu, dt=1.0 / n)
                problem = build_problem(params, n, gamma_d, gamma_p)
                exact = manufactured_solution(params)
                state, _ = run_transient(
                    problem, exact, rtol=rtol, maxit=maxit, warm_start=warm_start
                )
                err = compute_errors(problem, state, exact).as_tuple()
                if prev is None:
                    rates = (None,) * 5
                else:
                    prev_n, prev_err = prev
                    factor = math.log(n / prev_n)
                    rates = tuple(
                        math.log(pe / e) / factor if e > 0 and pe > 0 else None
                        for pe, e in zip(prev_err, err)
                    )
                table.add(beta, nu, n, params.dt, err, rates)
                prev = (n, err)
                if progress is not None:
                    progress(beta, nu, n, err)
    return table


def preconditioning_study(base_params, n_list, beta_list, nu_list, dt_list,
                          gamma_d="x=0", gamma_p="all", rtol=1e-8, maxit=1000,
                          steps=10, progress=None):
    """Iteration counts of preconditioned MinRes over the parameter grid.

    Every step is solved from a zero initial guess so counts are comparable
    across steps; a step hitting the iteration limit is recorded at the
    limit with ``converged=false`` instead of raising.
    """
    table = IterTable()
    for beta in beta_list:
        for dt in dt_list:
            for nu in nu_list:
                for n in n_list:
                    params = replace(base_params, beta=beta, nu=nu, dt=dt)
                    problem = build_problem(params, n, gamma_d, gamma_p)
                    exact = manufactured_solution(params)
                    state = initial_data(problem, exact)
                    loads = _loads(problem, exact, 0.0)
                    counts = []
                    ok = True
                    for k in range(steps):
                        t_next = (k + 1) * dt
                        loads_next = _loads(problem, exact, t_next)
                        try:
                            state = cn_step(
                                problem, state, loads, loads_next, rtol, maxit
                            )
                            counts.append(state.report.iterations)
                        except NotConvergedError as exc:
                            counts.append(exc.report.iterations)
                            state = StepState(
                                state.t + dt, *problem.split(exc.x), exc.report
                            )
                            ok = False
                        loads = loads_next
                    table.add(
                        beta, dt, nu, n, problem.num_dofs,
                        counts[0], max(counts), float(np.mean(counts)), ok,
                    )
                    if progress is not None:
                        progress(beta, dt, nu, n, counts)
    return table


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def pressure_redundancy_vector(dofs):
    """The one coefficient vector representing the zero function.

    Constants live in both pressure blocks, so the (vertex, cell) coefficient
    space maps onto the enriched space with the one-dimensional kernel
    (1, ..., 1, -1, ..., -1).  Every function-level operator annihilates it
    and every assembled load is orthogonal to it, which keeps the singular
    step systems consistent; MinRes is unaffected, but dense spectral
    diagnostics must project it out.
    """
    k = np.zeros(dofs.num_total)
    k[dofs.num_u : dofs.num_u + dofs.num_pc] = 1.0
    k[dofs.num_u + dofs.num_pc :] = -1.0
    return k


def canonicalize_pressure(problem, x):
    """Remove the redundancy component: area-weighted mean of the cell block
    becomes zero, fixing a unique coefficient representative of the state."""
    x = np.array(x, dtype=float)
    nu_, nv = problem.dofs.num_u, problem.dofs.num_pc
    areas = problem.mesh.tri_areas
    shift = float(areas @ x[nu_ + nv :]) / float(areas.sum())
    x[nu_ + nv :] -= shift
    x[nu_ : nu_ + nv] += shift
    return x


def infsup_diagnostic(problem, dense_limit=8):
    """Smallest |generalized eigenvalue| of the preconditioned step operator,
    after deflating the pressure redundancy direction.

    Uses a dense symmetric-definite eigensolve, so it is restricted to small
    meshes; a level-independent lower bound is the practical signature of
    the inf-sup stability of the pairing.
    """
    if problem.n > dense_limit:
        raise ConfigurationError(
            f"dense eigensolve refused for N={problem.n} > {dense_limit}"
        )
    b = problem.system.toarray()
    p = sp.block_diag([problem.p_v, problem.p_q]).toarray()
    k = pressure_redundancy_vector(problem.dofs)
    # restrict the pencil to the complement {x : k^T P x = 0}
    q, _ = np.linalg.qr((p @ k)[:, None], mode="complete")
    z = q[:, 1:]
    eigs = scipy.linalg.eigh(z.T @ b @ z, z.T @ p @ z, eigvals_only=True)
    return float(np.min(np.abs(eigs)))


def coercivity_ratio(mesh, dofs, params, forms, n_samples=200, seed=0):
    """Smallest Rayleigh quotient of the pressure form against its norm."""
    h_mat, _ = assemble_pressure_norm(mesh, dofs, params)
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n_samples):
        q = rng.standard_normal(dofs.num_p)
        denom = q @ (h_mat @ q)
        if denom <= 0.0:
            continue
        worst = min(worst, (q @ (forms.pressure @ q)) / denom)
    return worst


def check_divergence_range(table, tol=1e-10):
    """Largest nonconstant divergence coefficient across all element classes."""
    worst = 0.0
    for cls in table.classes:
        worst = max(worst, cls["basis"].divergence_residual())
    return worst <= tol, worst


def check_trace_continuity(mesh, dofs, table, tol=1e-10, component="normal"):
    """Trace matching of global shape functions across interior edges.

    ``component="normal"`` checks the edge L2 norm of the normal-trace jump
    (exact matching); ``component="tangential"`` checks the mean of the
    tangential jump (the only continuity the element provides).
    """
    s, w = edge_quadrature(7)
    worst = 0.0
    for e in mesh.interior_edges:
        a, b = mesh.edges[e]
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        pts = pa[None, :] + s[:, None] * (pb - pa)[None, :]
        direction = mesh.edge_normals[e] if component == "normal" else mesh.edge_tangents[e]
        h_e = mesh.edge_lengths[e]
        traces = {}
        for side, tri in enumerate(mesh.edge_tris[e]):
            vals = table.basis_for(tri).values(pts) @ direction  # (nq, 9)
            sign = 1.0 if side == 0 else -1.0
            for j, d in enumerate(dofs.tri_u_dofs[tri]):
                if d < 0:
                    continue
                traces[d] = traces.get(d, 0.0) + sign * vals[:, j]
        for jump in traces.values():
            if component == "normal":
                err = np.sqrt(h_e * float(w @ jump**2))
            else:
                err = abs(h_e * float(w @ jump))
            worst = max(worst, err)
    return worst <= tol, worst


def check_integral_identity(mesh, dofs, table, n_pairs=50, seed=0, tol=1e-12):
    """Vertex-patch identity: 3 (div v, q) equals (div v, sum of patch
    indicators weighted by vertex values), for random v and continuous q."""
    rng = np.random.default_rng(seed)
    rule = table.rule
    nv = dofs.num_pc
    # per-triangle divergence coefficients of a displacement vector
    div_map = np.zeros((mesh.num_triangles, 9))
    for cid, cls in enumerate(table.classes):
        div_map[table.class_tris[cid]] = cls["div"]
    areas = mesh.tri_areas
    hats_int = rule.weights @ rule.points  # integral of each hat on the reference

    worst = 0.0
    for _ in range(n_pairs):
        v = rng.standard_normal(dofs.num_u)
        qc = rng.standard_normal(nv)
        coeffs = np.where(
            dofs.tri_u_dofs >= 0, v[np.clip(dofs.tri_u_dofs, 0, None)], 0.0
        )
        div_t = np.einsum("tj,tj->t", coeffs, div_map)
        # quadrature of q over each triangle (hat integrals are |T|/3 exactly)
        q_int = (mesh.tri_areas / 0.5) * (qc[mesh.triangles] @ hats_int)
        lhs = 3.0 * float(div_t @ q_int)
        rhs = float(div_t @ (areas * qc[mesh.triangles].sum(axis=1)))
        scale = max(abs(lhs), abs(rhs), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst <= tol, worst


def check_vertex_patch_counts(mesh):
    """Sum of vertex-patch indicators is 3 on every triangle."""
    counts = np.zeros(mesh.num_triangles)
    for t in range(mesh.num_triangles):
        counts[t] = len(set(mesh.triangles[t]))
    return bool(np.all(counts == 3)), float(np.min(counts))


def check_stabilization_kernel(problem, seed=0):
    """Stabilization rows/columns of the continuous block vanish exactly
    (structurally empty) and cellwise constants are in the kernel up to
    summation roundoff."""
    s_mat = problem.forms.stabilization
    nv = problem.dofs.num_pc
    structural = s_mat[:nv, :].nnz == 0 and s_mat[:, :nv].nnz == 0
    rng = np.random.default_rng(seed)
    qc = np.zeros(problem.dofs.num_p)
    qc[:nv] = rng.standard_normal(nv)
    qc_val = float(abs(qc @ (s_mat @ qc)))
    ones = np.zeros(problem.dofs.num_p)
    ones[nv:] = 1.0
    scale = max(float(abs(s_mat).max()) if s_mat.nnz else 0.0, 1e-300)
    const_resid = float(np.abs(s_mat @ ones).max()) / scale
    ok = structural and qc_val == 0.0 and const_resid <= 1e-12
    return ok, max(const_resid, qc_val, 0.0 if structural else 1.0)


def check_exact_symmetry(problem):
    ds = abs(problem.system - problem.system.T)
    dp = abs(sp.block_diag([problem.p_v, problem.p_q])
             - sp.block_diag([problem.p_v, problem.p_q]).T)
    worst = max(ds.max() if ds.nnz else 0.0, dp.max() if dp.nnz else 0.0)
    return worst == 0.0, worst


def check_norm_consistency(mesh, dofs, params, n_samples=20, seed=0, tol=1e-12):
    """Combined pressure-norm matrix agrees with its term-by-term assembly."""
    combined, parts = assemble_pressure_norm(mesh, dofs, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        q = rng.standard_normal(dofs.num_p)
        total = q @ (combined @ q)
        split_sum = sum(q @ (m @ q) for m in parts.values())
        scale = max(abs(total), abs(split_sum), 1e-300)
        worst = max(worst, abs(total - split_sum) / scale)
    return worst <= tol, worst


@dataclass
class DiagnosticsReport:
    checks: list  # (name, passed, worst_value, threshold)

    @property
    def all_passed(self):
        return all(ok for _, ok, _, _ in self.checks)

    def failures(self):
        return [name for name, ok, _, _ in self.checks if not ok]

    def format(self):
        lines = []
        for name, ok, worst, threshold in self.checks:
            status = "pass" if ok else "FAIL"
            lines.append(f"{status:4s}  {name:28s} worst {worst:.3e} (limit {threshold})")
        return "\n".join(lines)


def structural_diagnostics(problem, seed=0):
    """Run the full structural check suite on an assembled problem."""
    mesh, dofs, table, params = problem.mesh, problem.dofs, problem.table, problem.params
    checks = []

    ok, worst = check_integral_identity(mesh, dofs, table, 50, seed)
    checks.append(("vertex-patch integral identity", ok, worst, "1e-12"))

    ok, worst = check_vertex_patch_counts(mesh)
    checks.append(("patch indicator count = 3", ok, worst, "exact"))

    ok, worst = check_divergence_range(table)
    checks.append(("cellwise-constant divergence", ok, worst, "1e-10"))

    ok, worst = check_trace_continuity(mesh, dofs, table, component="normal")
    checks.append(("normal-trace continuity", ok, worst, "1e-10"))

    ok, worst = check_trace_continuity(mesh, dofs, table, component="tangential")
    checks.append(("tangential mean continuity", ok, worst, "1e-10"))

    ok, worst = check_stabilization_kernel(problem, seed)
    checks.append(("stabilization kernel", ok, worst, "exact"))

    ok, worst = check_exact_symmetry(problem)
    checks.append(("operator symmetry", ok, worst, "exact"))

    ratio = coercivity_ratio(mesh, dofs, params, problem.forms, 200, seed)
    checks.append(("pressure-form coercivity", ratio >= 0.1, ratio, ">= 0.1"))

    ok, worst = check_norm_consistency(mesh, dofs, params, 20, seed)
    checks.append(("pressure norm consistency", ok, worst, "1e-12"))

    return DiagnosticsReport(checks)
