"""Assembly of all bilinear forms, the time-discrete system and the
block-diagonal preconditioner.

Notation for the assembled blocks (u = displacement, p = pressure):

* ``elasticity``      A_u[i,j] = (2 mu eps(phi_j), eps(phi_i)) + (lam div phi_j, div phi_i)
* ``coupling``        B[q,j]   = -(alpha q, div phi_j), rows over both pressure blocks
* ``storage_mass``    M[q,r]   = (s0 r, q)
* ``stabilization``   S[q,r]   = gamma (1/lam + C1) sum_{interior e} h_e^{-1} <[r], [q]>_e
* ``pressure``        A_p      = interior-penalty form for the enriched pair:
                      volume stiffness of the continuous part, symmetric
                      consistency terms pairing averaged fluxes with jumps,
                      interior jump penalty scaled h^{-1-beta}, and penalty
                      plus consistency terms on pressure-Dirichlet edges.

All scalar jumps follow the mesh's global edge orientation (T+ trace minus
T- trace times the stored normal).  Since the continuous block has no
interior jumps and cellwise constants have no gradients, interior jump
terms see only the cell block and all gradient averages reduce to averages
of continuous-part gradients.  Boundary terms are restricted to the
pressure-Dirichlet part; no-flux edges carry the natural condition and are
penalty free.

Every symmetric operator is finalized as (A + A^T)/2, which makes the
stored matrix symmetric exactly, not just to rounding.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elements import ElementTable, hat_gradients, triangle_quadrature
from .errors import ConfigurationError

__all__ = [
    "ModelParams",
    "AssembledForms",
    "assemble_forms",
    "assemble_elasticity",
    "assemble_coupling",
    "assemble_storage_mass",
    "assemble_stabilization",
    "assemble_pressure_form",
    "assemble_pressure_norm",
    "assemble_system",
    "assemble_preconditioner",
    "assemble_load_displacement",
    "assemble_load_pressure",
    "assemble_projection_rhs",
    "dump_matrix",
]


@dataclass
class ModelParams:
    """Physical and discretization parameters.

    The Lame coefficients derive from Young's modulus ``E`` and Poisson
    ratio ``nu``; ``nu`` close to 1/2 is the nearly incompressible regime.
    ``s0`` may be a nonnegative scalar or a callable ``s0(points) -> (n,)``;
    ``kappa`` a positive scalar or a 2x2 SPD array.  ``beta`` is the extra
    power of 1/h applied to interior pressure jumps (0 recovers the plain
    penalty); ``gamma`` the penalty strength; ``C1`` the weight of the
    storage-independent part of the stabilization form.
    """

    nu: float = 0.3
    E: float = 1.0
    alpha: float = 1.0
    s0: object = 0.0
    kappa: object = 1.0
    gamma: float = 10.0
    beta: int = 1
    C1: float = 1.0
    dt: float = 0.1
    T: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.nu < 0.5:
            raise ConfigurationError(f"nu must lie in (0, 1/2), got {self.nu}")
        if self.E <= 0.0:
            raise ConfigurationError(f"E must be positive, got {self.E}")
        if self.alpha <= 0.0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.gamma <= 0.0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.C1 < 0.0:
            raise ConfigurationError(f"C1 must be nonnegative, got {self.C1}")
        if not float(self.beta) == int(self.beta) or self.beta < 0:
            raise ConfigurationError(f"beta must be a nonnegative integer, got {self.beta}")
        self.beta = int(self.beta)
        if self.dt <= 0.0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.T <= 0.0:
            raise ConfigurationError(f"T must be positive, got {self.T}")
        if not callable(self.s0) and float(self.s0) < 0.0:
            raise ConfigurationError(f"s0 must be nonnegative, got {self.s0}")
        k = self.kappa_matrix()
        if np.linalg.norm(k - k.T) > 1e-14 * np.linalg.norm(k) or np.any(
            np.linalg.eigvalsh(k) <= 0.0
        ):
            raise ConfigurationError("kappa must be symmetric positive definite")

    @classmethod
    def from_lame(cls, mu, lam, **kwargs):
        """Construct from Lame coefficients instead of (E, nu)."""
        nu = lam / (2.0 * (lam + mu))
        e = 2.0 * mu * (1.0 + nu)
        return cls(nu=nu, E=e, **kwargs)

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self):
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    def kappa_matrix(self):
        k = self.kappa
        if np.isscalar(k):
            return float(k) * np.eye(2)
        return np.asarray(k, dtype=float)

    def eval_s0(self, points):
        """s0 at an (n, 2) array of points."""
        points = np.atleast_2d(points)
        if callable(self.s0):
            return np.asarray(self.s0(points), dtype=float)
        return np.full(points.shape[0], float(self.s0))

    @property
    def s0_is_zero(self):
        return not callable(self.s0) and float(self.s0) == 0.0


@dataclass
class AssembledForms:
    """All time-independent operators on the unconstrained DOF sets."""

    elasticity: sp.csr_matrix
    coupling: sp.csr_matrix
    storage_mass: sp.csr_matrix
    stabilization: sp.csr_matrix
    pressure: sp.csr_matrix


# ---------------------------------------------------------------------------
# small assembly helpers
# ---------------------------------------------------------------------------

class _Triplets:
    """COO accumulator that drops entries with negative (constrained) indices."""

    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        vals = np.broadcast_to(vals, np.broadcast_shapes(rows.shape, cols.shape))
        rows = np.broadcast_to(rows, vals.shape)
        cols = np.broadcast_to(cols, vals.shape)
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())
        self.vals.append(np.asarray(vals, dtype=float).ravel())

    def build(self, nrows, ncols):
        if not self.rows:
            return sp.csr_matrix((nrows, ncols))
        r = np.concatenate(self.rows)
        c = np.concatenate(self.cols)
        v = np.concatenate(self.vals)
        keep = (r >= 0) & (c >= 0)
        return sp.csr_matrix((v[keep], (r[keep], c[keep])), shape=(nrows, ncols))


def _symmetrize(a):
    return ((a + a.T) * 0.5).tocsr()


def _kappa_normal(kap, normals):
    """n^T kappa n for an array of unit normals."""
    return np.einsum("ka,ab,kb->k", normals, kap, normals)


def _tri_quad_points(mesh, rule):
    """Physical quadrature points (nt, nq, 2) and weights (nt, nq)."""
    pts = np.einsum("qi,tid->tqd", rule.points, mesh.vertices[mesh.triangles])
    wts = rule.weights[None, :] * (mesh.tri_areas[:, None] / 0.5)
    return pts, wts


# ---------------------------------------------------------------------------
# displacement block
# ---------------------------------------------------------------------------

def assemble_elasticity(mesh, dofs, params, table=None):
    """Stiffness of the displacement form (broken symmetric gradients)."""
    table = table if table is not None else ElementTable(mesh)
    mu, lam = params.mu, params.lam
    contract = np.array([1.0, 1.0, 2.0])  # eps:eps over (xx, yy, xy) components
    trip = _Triplets()
    for cid, cls in enumerate(table.classes):
        tris = table.class_tris[cid]
        if len(tris) == 0:
            continue
        k_loc = 2.0 * mu * np.einsum(
            "q,qia,qja,a->ij", cls["weights"], cls["eps"], cls["eps"], contract
        )
        k_loc += lam * cls["area"] * np.outer(cls["div"], cls["div"])
        k_loc = 0.5 * (k_loc + k_loc.T)
        dmap = dofs.tri_u_dofs[tris]
        trip.add(dmap[:, :, None], dmap[:, None, :], k_loc[None, :, :])
    return _symmetrize(trip.build(dofs.num_u, dofs.num_u))


def assemble_coupling(mesh, dofs, params, table=None):
    """Pressure-displacement coupling -(alpha q, div v), rows over pressure DOFs."""
    table = table if table is not None else ElementTable(mesh)
    alpha = params.alpha
    nv = dofs.num_pc
    trip = _Triplets()
    for cid, cls in enumerate(table.classes):
        tris = table.class_tris[cid]
        if len(tris) == 0:
            continue
        cell_vals = -alpha * cls["div"] * cls["area"]  # (9,)
        cols = dofs.tri_u_dofs[tris]  # (m, 9)
        trip.add((nv + tris)[:, None], cols, cell_vals[None, :])
        # each vertex hat integrates to |T|/3 against a constant divergence
        verts = mesh.triangles[tris]  # (m, 3)
        trip.add(verts[:, :, None], cols[:, None, :], (cell_vals / 3.0)[None, None, :])
    return trip.build(dofs.num_p, dofs.num_u)


# ---------------------------------------------------------------------------
# pressure blocks
# ---------------------------------------------------------------------------

def assemble_storage_mass(mesh, dofs, params, table=None):
    """Weighted pressure mass (s0 q, r) over both enriched blocks."""
    nv = dofs.num_pc
    if params.s0_is_zero:
        return sp.csr_matrix((dofs.num_p, dofs.num_p))
    rule = table.rule if table is not None else triangle_quadrature(6)
    pts, wts = _tri_quad_points(mesh, rule)
    s0 = params.eval_s0(pts.reshape(-1, 2)).reshape(pts.shape[:2])
    phi = np.hstack([rule.points, np.ones((len(rule.weights), 1))])  # (nq, 4)
    local = np.einsum("tq,qi,qj->tij", s0 * wts, phi, phi)
    pdofs = np.hstack([mesh.triangles, (nv + np.arange(mesh.num_triangles))[:, None]])
    trip = _Triplets()
    trip.add(pdofs[:, :, None], pdofs[:, None, :], local)
    return _symmetrize(trip.build(dofs.num_p, dofs.num_p))


def assemble_stabilization(mesh, dofs, params):
    """Interior jump penalty weighted by 1/lam and C1 (time-derivative terms).

    Only the cell block has interior jumps, so rows and columns of the
    continuous block are identically empty.
    """
    nv = dofs.num_pc
    trip = _Triplets()
    interior = mesh.interior_edges
    if len(interior):
        coef = params.gamma * (1.0 / params.lam + params.C1)
        cells = nv + mesh.edge_tris[interior]  # (k, 2)
        block = coef * np.array([[1.0, -1.0], [-1.0, 1.0]])
        trip.add(cells[:, :, None], cells[:, None, :], block[None, :, :])
    return _symmetrize(trip.build(dofs.num_p, dofs.num_p))


def _pressure_volume_stiffness(mesh, kap, trip):
    grads = hat_gradients(mesh)
    kgrads = np.einsum("tia,ab->tib", grads, kap)
    local = np.einsum("tia,tja->tij", kgrads, grads) * mesh.tri_areas[:, None, None]
    tv = mesh.triangles
    trip.add(tv[:, :, None], tv[:, None, :], local)
    return kgrads


_BND_TRACE_GRAM = np.array(
    [[1.0 / 3.0, 1.0 / 6.0, 1.0 / 2.0],
     [1.0 / 6.0, 1.0 / 3.0, 1.0 / 2.0],
     [1.0 / 2.0, 1.0 / 2.0, 1.0]]
)  # integrals of products of {1-s, s, 1} with the h factor removed


def _boundary_trace_dofs(mesh, dofs, edges):
    """Trace DOFs [start hat, end hat, cell] per boundary edge."""
    nv = dofs.num_pc
    t_adj = mesh.edge_tris[edges, 0]
    return np.column_stack([mesh.edges[edges], nv + t_adj]), t_adj


def assemble_pressure_form(mesh, dofs, params):
    """Interior-penalty form for the enriched pair (symmetric)."""
    nv = dofs.num_pc
    kap = params.kappa_matrix()
    gamma, beta = params.gamma, params.beta
    trip = _Triplets()
    kgrads = _pressure_volume_stiffness(mesh, kap, trip)

    interior = mesh.interior_edges
    if len(interior):
        adj = mesh.edge_tris[interior]          # (k, 2) = [T+, T-]
        n_e = mesh.edge_normals[interior]
        h_e = mesh.edge_lengths[interior]
        kn = _kappa_normal(kap, n_e)
        cell_cols = nv + adj                    # (k, 2)
        jump_sign = np.array([1.0, -1.0])

        # -<{kappa grad q^c}, [r^0]> and its transpose; the average picks up
        # one half of each side's hat gradients
        for side in (0, 1):
            tri_side = adj[:, side]
            flux = np.einsum("kia,ka->ki", kgrads[tri_side], n_e)  # (k, 3)
            vals = -0.5 * h_e[:, None, None] * flux[:, :, None] * jump_sign[None, None, :]
            rows = mesh.triangles[tri_side][:, :, None]
            cols = cell_cols[:, None, :]
            trip.add(rows, cols, vals)
            trip.add(cols, rows, vals)

        # interior jump penalty, over-stabilized by h^-beta
        pen = (gamma * kn * h_e ** (-float(beta)))[:, None, None] * np.array(
            [[1.0, -1.0], [-1.0, 1.0]]
        )[None, :, :]
        trip.add(cell_cols[:, :, None], cell_cols[:, None, :], pen)

    pedges = np.flatnonzero(dofs.tags.is_pressure)
    if len(pedges):
        tdofs, t_adj = _boundary_trace_dofs(mesh, dofs, pedges)
        n_e = mesh.edge_normals[pedges]
        h_e = mesh.edge_lengths[pedges]
        kn = _kappa_normal(kap, n_e)
        flux = np.einsum("kia,ka->ki", kgrads[t_adj], n_e)  # (k, 3)
        # trace integrals of {start hat, end hat, cell} along the edge
        tw = np.column_stack([0.5 * h_e, 0.5 * h_e, h_e])
        vals = -flux[:, :, None] * tw[:, None, :]
        rows = mesh.triangles[t_adj][:, :, None]
        cols = tdofs[:, None, :]
        trip.add(rows, cols, vals)
        trip.add(cols, rows, vals)

        pen = (gamma * kn)[:, None, None] * _BND_TRACE_GRAM[None, :, :]
        trip.add(tdofs[:, :, None], tdofs[:, None, :], pen)

    return _symmetrize(trip.build(dofs.num_p, dofs.num_p))


def assemble_pressure_norm(mesh, dofs, params):
    """Gram matrix of the discrete pressure norm used by the coercivity check.

    Returns ``(combined, parts)`` where ``parts`` maps term names to the
    separately assembled pieces: continuous-part stiffness, interior jump
    term with the over-stabilized weight, and the two boundary trace terms
    (continuous and cell block separately, no cross coupling).
    """
    nv = dofs.num_pc
    kap = params.kappa_matrix()
    gamma, beta = params.gamma, params.beta
    parts = {}

    trip = _Triplets()
    _pressure_volume_stiffness(mesh, kap, trip)
    parts["stiffness"] = _symmetrize(trip.build(dofs.num_p, dofs.num_p))

    trip = _Triplets()
    interior = mesh.interior_edges
    if len(interior):
        kn = _kappa_normal(kap, mesh.edge_normals[interior])
        h_e = mesh.edge_lengths[interior]
        cells = nv + mesh.edge_tris[interior]
        pen = (gamma * kn * h_e ** (-float(beta)))[:, None, None] * np.array(
            [[1.0, -1.0], [-1.0, 1.0]]
        )[None, :, :]
        trip.add(cells[:, :, None], cells[:, None, :], pen)
    parts["interior_jumps"] = _symmetrize(trip.build(dofs.num_p, dofs.num_p))

    pedges = np.flatnonzero(dofs.tags.is_pressure)
    trip_c = _Triplets()
    trip_0 = _Triplets()
    if len(pedges):
        tdofs, t_adj = _boundary_trace_dofs(mesh, dofs, pedges)
        kn = _kappa_normal(kap, mesh.edge_normals[pedges])
        hats = tdofs[:, :2]
        gram = (gamma * kn)[:, None, None] * _BND_TRACE_GRAM[None, :2, :2]
        trip_c.add(hats[:, :, None], hats[:, None, :], gram)
        cells = tdofs[:, 2]
        trip_0.add(cells, cells, gamma * kn)
    parts["boundary_continuous"] = _symmetrize(trip_c.build(dofs.num_p, dofs.num_p))
    parts["boundary_cells"] = _symmetrize(trip_0.build(dofs.num_p, dofs.num_p))

    combined = sum(parts.values()).tocsr()
    return combined, parts


# ---------------------------------------------------------------------------
# system and preconditioner
# ---------------------------------------------------------------------------

def assemble_forms(mesh, dofs, params, table=None):
    table = table if table is not None else ElementTable(mesh)
    return AssembledForms(
        elasticity=assemble_elasticity(mesh, dofs, params, table),
        coupling=assemble_coupling(mesh, dofs, params, table),
        storage_mass=assemble_storage_mass(mesh, dofs, params, table),
        stabilization=assemble_stabilization(mesh, dofs, params),
        pressure=assemble_pressure_form(mesh, dofs, params),
    )


def assemble_system(forms, params):
    """Symmetric indefinite operator of one implicit time step.

    Block structure [[A_u, B^T], [B, -(M_s0 + S + dt/2 A_p)]].
    """
    a_u = forms.elasticity
    b = forms.coupling
    if a_u.shape[1] != b.shape[1]:
        raise ValueError(
            f"coupling has {b.shape[1]} displacement columns, elasticity {a_u.shape[1]}"
        )
    m_p = (forms.storage_mass + forms.stabilization + 0.5 * params.dt * forms.pressure)
    return sp.bmat([[a_u, b.T], [b, -m_p]], format="csr")


def assemble_preconditioner(mesh, dofs, params, forms, table=None):
    """Block-diagonal SPD preconditioner (displacement block, pressure block).

    The displacement block reuses the elasticity operator.  The pressure
    block is block diagonal across the continuous and cell sub-blocks:
    each carries its (s0 + 1/lam)-weighted mass plus dt/2 times its part of
    the pressure norm (stiffness and boundary trace penalty for the
    continuous block; interior over-stabilized jumps and boundary penalty
    for the cell block, the latter additionally carrying the stabilization
    form).  Returns ``(P_V, P_Q)``.
    """
    nv, nt = dofs.num_pc, dofs.num_p0
    kap = params.kappa_matrix()
    gamma, beta = params.gamma, params.beta
    half_dt = 0.5 * params.dt
    rule = table.rule if table is not None else triangle_quadrature(6)
    pts, wts = _tri_quad_points(mesh, rule)
    weight = params.eval_s0(pts.reshape(-1, 2)).reshape(pts.shape[:2]) + 1.0 / params.lam

    # continuous sub-block
    trip = _Triplets()
    hats = rule.points
    mass = np.einsum("tq,qi,qj->tij", weight * wts, hats, hats)
    tv = mesh.triangles
    trip.add(tv[:, :, None], tv[:, None, :], mass)

    grads = hat_gradients(mesh)
    kgrads = np.einsum("tia,ab->tib", grads, kap)
    stiff = np.einsum("tia,tja->tij", kgrads, grads) * mesh.tri_areas[:, None, None]
    trip.add(tv[:, :, None], tv[:, None, :], half_dt * stiff)

    pedges = np.flatnonzero(dofs.tags.is_pressure)
    if len(pedges):
        kn = _kappa_normal(kap, mesh.edge_normals[pedges])
        hat_dofs = mesh.edges[pedges]
        gram = (half_dt * gamma * kn)[:, None, None] * _BND_TRACE_GRAM[None, :2, :2]
        trip.add(hat_dofs[:, :, None], hat_dofs[:, None, :], gram)
    p_qc = _symmetrize(trip.build(nv, nv))

    # cell sub-block
    trip = _Triplets()
    cells = np.arange(nt)
    trip.add(cells, cells, np.einsum("tq->t", weight * wts))

    interior = mesh.interior_edges
    if len(interior):
        adj = mesh.edge_tris[interior]
        kn = _kappa_normal(kap, mesh.edge_normals[interior])
        h_e = mesh.edge_lengths[interior]
        stab = params.gamma * (1.0 / params.lam + params.C1)
        coef = stab + half_dt * gamma * kn * h_e ** (-float(beta))
        block = coef[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])[None, :, :]
        trip.add(adj[:, :, None], adj[:, None, :], block)

    if len(pedges):
        kn = _kappa_normal(kap, mesh.edge_normals[pedges])
        bcells = mesh.edge_tris[pedges, 0]
        trip.add(bcells, bcells, half_dt * gamma * kn)
    p_q0 = _symmetrize(trip.build(nt, nt))

    p_q = sp.block_diag([p_qc, p_q0], format="csr")
    return forms.elasticity, p_q


# ---------------------------------------------------------------------------
# load vectors
# ---------------------------------------------------------------------------

def assemble_load_displacement(mesh, dofs, func, t, table=None):
    """Quadrature of (f(t), v) against all unconstrained displacement DOFs."""
    table = table if table is not None else ElementTable(mesh)
    out = np.zeros(dofs.num_u)
    for cid, cls in enumerate(table.classes):
        tris = table.class_tris[cid]
        if len(tris) == 0:
            continue
        pts = table.quad_points(tris, cls)  # (m, nq, 2)
        fvals = np.asarray(func(pts.reshape(-1, 2), t), dtype=float)
        fvals = fvals.reshape(pts.shape)
        local = np.einsum("mqc,qjc,q->mj", fvals, cls["phi"], cls["weights"])
        dmap = dofs.tri_u_dofs[tris]
        valid = dmap >= 0
        np.add.at(out, dmap[valid], local[valid])
    return out


def assemble_load_pressure(mesh, dofs, func, t, table=None):
    """Quadrature of (g(t), q) against both enriched pressure blocks."""
    rule = table.rule if table is not None else triangle_quadrature(6)
    pts, wts = _tri_quad_points(mesh, rule)
    gvals = np.asarray(func(pts.reshape(-1, 2), t), dtype=float).reshape(pts.shape[:2])
    phi = np.hstack([rule.points, np.ones((len(rule.weights), 1))])
    local = np.einsum("tq,qi->ti", gvals * wts, phi)
    out = np.zeros(dofs.num_p)
    pdofs = np.hstack([mesh.triangles, (dofs.num_pc + np.arange(mesh.num_triangles))[:, None]])
    np.add.at(out, pdofs, local)
    return out


def assemble_projection_rhs(mesh, dofs, params, pfunc, gradpfunc, t, table=None):
    """Action of the pressure form on a smooth function: rhs of the elliptic
    projection solve A_p p_h = a_p(p(t), .).

    ``pfunc(points, t) -> (n,)`` and ``gradpfunc(points, t) -> (n, 2)``.
    The function is assumed continuous, so interior jump terms of the first
    argument vanish; its averaged flux still pairs with cell jumps.
    """
    from .elements import edge_quadrature

    nv = dofs.num_pc
    kap = params.kappa_matrix()
    rule = table.rule if table is not None else triangle_quadrature(6)
    out = np.zeros(dofs.num_p)

    # volume term (kappa grad p, grad hat)
    pts, wts = _tri_quad_points(mesh, rule)
    gp = np.asarray(gradpfunc(pts.reshape(-1, 2), t), dtype=float).reshape(pts.shape)
    grads = hat_gradients(mesh)
    kgrads = np.einsum("tia,ab->tib", grads, kap)
    np.add.at(out, mesh.triangles, np.einsum("tqa,tia,tq->ti", gp, kgrads, wts))

    s_nodes, s_w = edge_quadrature(6)

    def edge_points(edges):
        a = mesh.vertices[mesh.edges[edges, 0]]
        b = mesh.vertices[mesh.edges[edges, 1]]
        return a[:, None, :] + s_nodes[None, :, None] * (b - a)[:, None, :]

    interior = mesh.interior_edges
    if len(interior):
        e_pts = edge_points(interior)
        gp_e = np.asarray(gradpfunc(e_pts.reshape(-1, 2), t), dtype=float).reshape(e_pts.shape)
        kn_flux = np.einsum("kea,ab,kb->ke", gp_e, kap, mesh.edge_normals[interior])
        flux_int = (kn_flux @ s_w) * mesh.edge_lengths[interior]
        cells = nv + mesh.edge_tris[interior]
        np.add.at(out, cells[:, 0], -flux_int)
        np.add.at(out, cells[:, 1], flux_int)

    pedges = np.flatnonzero(dofs.tags.is_pressure)
    if len(pedges):
        gamma = params.gamma
        kn = _kappa_normal(kap, mesh.edge_normals[pedges])
        h_e = mesh.edge_lengths[pedges]
        e_pts = edge_points(pedges)
        flat = e_pts.reshape(-1, 2)
        gp_e = np.asarray(gradpfunc(flat, t), dtype=float).reshape(e_pts.shape)
        p_e = np.asarray(pfunc(flat, t), dtype=float).reshape(e_pts.shape[:2])
        kap_gp = np.einsum("kea,ab->keb", gp_e, kap)
        flux_q = np.einsum("kea,ka->ke", kap_gp, mesh.edge_normals[pedges])

        tdofs, t_adj = _boundary_trace_dofs(mesh, dofs, pedges)
        traces = np.stack(
            [1.0 - s_nodes, s_nodes, np.ones_like(s_nodes)], axis=0
        )  # (3, nq)

        # -<kappa grad p . n, trace> + gamma kn / h <p, trace>
        flux_w = np.einsum("ke,e,ce->kc", flux_q, s_w, traces) * h_e[:, None]
        pen_w = np.einsum("ke,e,ce->kc", p_e, s_w, traces) * h_e[:, None]
        vals = -flux_w + (gamma * kn / h_e)[:, None] * pen_w
        np.add.at(out, tdofs, vals)

        # -<p, kappa grad hat . n> for all three hats of the adjacent triangle
        hat_flux = np.einsum("kia,ka->ki", kgrads[t_adj], mesh.edge_normals[pedges])
        p_int = (p_e @ s_w) * h_e
        np.add.at(out, mesh.triangles[t_adj], -hat_flux * p_int[:, None])

    return out


def dump_matrix(a, stream):
    """Write a sparse matrix in coordinate text format (row col value)."""
    coo = a.tocoo()
    stream.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
    for r, c, v in zip(coo.row, coo.col, coo.data):
        stream.write(f"{r} {c} {v:.17g}\n")
