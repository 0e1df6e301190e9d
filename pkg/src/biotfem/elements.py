"""Finite elements: quadrature, the lowest-order Mardal-Tai-Winther vector
element, and the enriched Galerkin pressure pair (continuous P1 + cellwise P0).

The MTW local space on a triangle T is

    { v in P3(T; R^2) : div v is constant on T,
                        v.n restricted to each edge is linear },

a 9-dimensional space (20 cubic vector coefficients minus 5 divergence
constraints minus 6 edge-trace constraints).  Its degrees of freedom are,
per edge: two moments of the normal component against {1, s - 1/2} in
normalized arc length, and the mean of the tangential component.  Normal
components are therefore single valued across edges (the global space is
H(div)-conforming) while tangential traces match only in the mean.

The basis is built directly on each physical triangle: a nullspace of the
constraint system over scaled local monomials, followed by inversion of the
9 x 9 DOF matrix.  Construction is cached per congruence class, so on a
structured mesh only two distinct constructions ever run.  All orientation
data (edge normals, tangents, arc-length direction) comes from the mesh's
global edge orientation, which makes shared DOFs single valued without any
sign bookkeeping at assembly time.
"""

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, ElementConstructionError

# monomial exponents up to degree 3: 1, x, y, x2, xy, y2, x3, x2y, xy2, y3
_EXPONENTS = np.array(
    [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2], [3, 0], [2, 1], [1, 2], [0, 3]]
)
_NMONO = 10


def _derivative_matrices():
    """Matrices mapping monomial coefficients to coefficients of d/dx, d/dy."""
    index = {tuple(e): k for k, e in enumerate(_EXPONENTS)}
    dx = np.zeros((_NMONO, _NMONO))
    dy = np.zeros((_NMONO, _NMONO))
    for k, (i, j) in enumerate(_EXPONENTS):
        if i > 0:
            dx[index[(i - 1, j)], k] = i
        if j > 0:
            dy[index[(i, j - 1)], k] = j
    return dx, dy


_DX, _DY = _derivative_matrices()


def _monomial_values(points):
    """Values of the 10 cubic monomials at (n, 2) points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return np.prod(pts[:, None, :] ** _EXPONENTS[None, :, :], axis=2)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

class QuadratureRule:
    """Symmetric quadrature on the reference triangle {x, y >= 0, x + y <= 1}.

    ``points`` are barycentric coordinates (n, 3); ``weights`` sum to the
    reference area 1/2 and the rule is exact for polynomials up to ``degree``.
    """

    def __init__(self, points, weights, degree):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.degree = degree

    def physical(self, verts):
        """Map to a physical triangle: returns (points (n,2), weights (n,))."""
        verts = np.asarray(verts, dtype=float)
        pts = self.points @ verts
        d1 = verts[1] - verts[0]
        d2 = verts[2] - verts[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        return pts, self.weights * (area / 0.5)


def _sym3(a, w):
    """The three permutations of barycentric (1-2a, a, a) with weight w."""
    b = 1.0 - 2.0 * a
    return [([b, a, a], w), ([a, b, a], w), ([a, a, b], w)]


def _sym6(a, b, w):
    c = 1.0 - a - b
    return [([x, y, z], w) for x, y, z in
            ((a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a))]


def _build_rules():
    rules = {}
    rules[1] = ([( [1 / 3, 1 / 3, 1 / 3], 1.0)], 1)
    rules[2] = (_sym3(1.0 / 6.0, 1.0 / 3.0), 2)
    rules[4] = (
        _sym3(0.445948490915965, 0.223381589678011)
        + _sym3(0.091576213509771, 0.109951743655322),
        4,
    )
    rules[6] = (
        _sym3(0.249286745170910, 0.116786275726379)
        + _sym3(0.063089014491502, 0.050844906370207)
        + _sym6(0.053145049844816, 0.310352451033785, 0.082851075618374),
        6,
    )
    built = {}
    for deg, (data, exact) in rules.items():
        pts = np.array([p for p, _ in data])
        wts = np.array([w for _, w in data]) * 0.5  # normalize to area 1/2
        built[deg] = QuadratureRule(pts, wts, exact)
    return built


_TRI_RULES = _build_rules()
MAX_TRI_DEGREE = max(_TRI_RULES)


def triangle_quadrature(degree):
    """Smallest tabulated symmetric rule exact for the requested degree."""
    if degree < 0 or degree > MAX_TRI_DEGREE:
        raise ConfigurationError(
            f"triangle quadrature degree {degree} unsupported (max {MAX_TRI_DEGREE})"
        )
    for d in sorted(_TRI_RULES):
        if d >= degree:
            return _TRI_RULES[d]
    raise AssertionError("unreachable")


def edge_quadrature(degree):
    """Gauss-Legendre rule on [0, 1] exact for the requested degree.

    Returns (nodes, weights) with weights summing to 1.
    """
    if degree < 0 or degree > 63:
        raise ConfigurationError(f"edge quadrature degree {degree} unsupported")
    npts = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# Mardal-Tai-Winther element
# ---------------------------------------------------------------------------

_EDGE_QP, _EDGE_QW = None, None


def _edge_rule():
    global _EDGE_QP, _EDGE_QW
    if _EDGE_QP is None:
        _EDGE_QP, _EDGE_QW = edge_quadrature(7)
    return _EDGE_QP, _EDGE_QW


class EdgeFrame:
    """Oriented geometry of one triangle edge: start/end points in the global
    orientation, unit tangent and unit normal."""

    __slots__ = ("start", "end", "tangent", "normal", "length")

    def __init__(self, start, end, normal=None):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        vec = self.end - self.start
        self.length = float(np.linalg.norm(vec))
        self.tangent = vec / self.length
        if normal is None:
            normal = np.array([self.tangent[1], -self.tangent[0]])
        self.normal = np.asarray(normal, dtype=float)


class MtwBasis:
    """The 9 local shape functions of one triangle.

    Each shape function is stored as monomial coefficients over scaled local
    coordinates xi = (x - centroid)/scale.  DOF ordering is edge major:
    ``[e0 normal-mean, e0 normal-slope, e0 tangential-mean, e1 ..., e2 ...]``
    following the triangle's local edges (k, k+1 mod 3).
    """

    def __init__(self, centroid, scale, coef_x, coef_y, div_consts, frames):
        self.centroid = np.asarray(centroid, dtype=float)
        self.scale = float(scale)
        self.coef_x = coef_x  # (10, 9)
        self.coef_y = coef_y  # (10, 9)
        self.div_consts = div_consts  # (9,)
        self.frames = frames

    def _local(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.centroid) / self.scale

    def values(self, points):
        """Shape function values at physical points: (n, 9, 2)."""
        m = _monomial_values(self._local(points))
        return np.stack([m @ self.coef_x, m @ self.coef_y], axis=-1)

    def gradients(self, points):
        """Jacobians d v_i / d x_j at physical points: (n, 9, 2, 2)."""
        m = _monomial_values(self._local(points))
        s = 1.0 / self.scale
        gxx = (m @ (_DX @ self.coef_x)) * s
        gxy = (m @ (_DY @ self.coef_x)) * s
        gyx = (m @ (_DX @ self.coef_y)) * s
        gyy = (m @ (_DY @ self.coef_y)) * s
        out = np.empty(gxx.shape + (2, 2))
        out[..., 0, 0] = gxx
        out[..., 0, 1] = gxy
        out[..., 1, 0] = gyx
        out[..., 1, 1] = gyy
        return out

    def divergences(self):
        """Elementwise-constant divergence of each shape function: (9,)."""
        return self.div_consts.copy()

    def divergence_residual(self):
        """Largest nonconstant divergence coefficient, relative to the
        natural gradient scale; zero for an exact construction."""
        div_coef = (_DX @ self.coef_x + _DY @ self.coef_y) / self.scale
        scale = max(np.abs(div_coef).max(), 1.0 / self.scale)
        return float(np.abs(div_coef[1:]).max() / scale)


def _edge_dof_rows(frame, centroid, scale):
    """Three DOF functionals of one edge as rows over the 20 coefficients."""
    s, w = _edge_rule()
    pts = frame.start[None, :] + s[:, None] * (frame.end - frame.start)[None, :]
    m = _monomial_values((pts - centroid) / scale)  # (nq, 10)
    nx, ny = frame.normal
    tx, ty = frame.tangent
    mean = w @ m                       # integral of each monomial over s in [0,1]
    slope = (12.0 * w * (s - 0.5)) @ m
    rows = np.empty((3, 2 * _NMONO))
    rows[0, :_NMONO] = nx * mean
    rows[0, _NMONO:] = ny * mean
    rows[1, :_NMONO] = nx * slope
    rows[1, _NMONO:] = ny * slope
    rows[2, :_NMONO] = tx * mean
    rows[2, _NMONO:] = ty * mean
    return rows


def _trace_poly_rows(frame, centroid, scale):
    """Rows expressing the s^2 and s^3 coefficients of v.n along an edge."""
    nodes = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    pts = frame.start[None, :] + nodes[:, None] * (frame.end - frame.start)[None, :]
    m = _monomial_values((pts - centroid) / scale)  # (4, 10)
    vand = np.vander(nodes, 4, increasing=True)
    to_coef = np.linalg.solve(vand, m)  # (4, 10): poly coefs of each monomial
    nx, ny = frame.normal
    rows = np.empty((2, 2 * _NMONO))
    for r, k in enumerate((2, 3)):
        rows[r, :_NMONO] = nx * to_coef[k]
        rows[r, _NMONO:] = ny * to_coef[k]
    return rows


def mtw_basis(verts, frames=None):
    """Construct the MTW basis on the triangle with the given vertices.

    ``frames`` supplies the global orientation of the three local edges
    (k, k+1 mod 3); when omitted, edges are oriented along the local vertex
    order with outward normals, which is adequate for a standalone triangle.
    """
    verts = np.asarray(verts, dtype=float)
    if frames is None:
        frames = [EdgeFrame(verts[k], verts[(k + 1) % 3]) for k in range(3)]
    centroid = verts.mean(axis=0)
    scale = max(np.linalg.norm(verts[(k + 1) % 3] - verts[k]) for k in range(3))
    if scale <= 0.0:
        raise ElementConstructionError("degenerate triangle (zero edge length)")

    # constraints: divergence linear/quadratic parts vanish (5 rows), edge
    # normal traces have no quadratic/cubic part (6 rows)
    rows = [np.hstack([_DX[k], _DY[k]]) for k in range(1, 6)]
    for fr in frames:
        rows.extend(_trace_poly_rows(fr, centroid, scale))
    constraints = np.array(rows)

    null = scipy.linalg.null_space(constraints)
    if null.shape[1] != 9:
        raise ElementConstructionError(
            f"constraint nullspace has dimension {null.shape[1]}, expected 9"
        )

    dof_rows = np.vstack([_edge_dof_rows(fr, centroid, scale) for fr in frames])
    dof_mat = dof_rows @ null  # (9, 9)
    cond = np.linalg.cond(dof_mat)
    if not np.isfinite(cond) or cond > 1e12:
        raise ElementConstructionError(
            f"DOF matrix is numerically singular (cond={cond:.3e})"
        )
    coef = null @ np.linalg.inv(dof_mat)  # (20, 9)

    coef_x = coef[:_NMONO]
    coef_y = coef[_NMONO:]
    div_coef = (_DX @ coef_x + _DY @ coef_y) / scale
    return MtwBasis(centroid, scale, coef_x, coef_y, div_coef[0].copy(), frames)


def mtw_eval(basis, points):
    """Values and Jacobians of all 9 shape functions at the given points."""
    return basis.values(points), basis.gradients(points)


def mtw_dof_values(frames, func):
    """Apply the 9 edge DOF functionals to an arbitrary vector field.

    ``func(points)`` must return values of shape (n, 2).  Used both for
    interpolation and for verifying duality of a constructed basis.
    """
    s, w = _edge_rule()
    out = np.empty(9)
    for k, fr in enumerate(frames):
        pts = fr.start[None, :] + s[:, None] * (fr.end - fr.start)[None, :]
        vals = np.asarray(func(pts), dtype=float)
        vn = vals @ fr.normal
        vt = vals @ fr.tangent
        out[3 * k] = w @ vn
        out[3 * k + 1] = (12.0 * w * (s - 0.5)) @ vn
        out[3 * k + 2] = w @ vt
    return out


def mtw_interpolate(basis, func):
    """Local DOF interpolation of a smooth vector field: coefficient vector."""
    return mtw_dof_values(basis.frames, func)


# ---------------------------------------------------------------------------
# enriched Galerkin pressure pair
# ---------------------------------------------------------------------------

def eg_eval(verts, points):
    """Vertex hat values and gradients on a triangle.

    Returns ``(hats, grads)`` with hats of shape (n, 3) and the constant
    gradients of shape (3, 2).  The cell indicator component of the enriched
    space is identically 1 with zero gradient and needs no tabulation.
    """
    verts = np.asarray(verts, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    jac = np.array([verts[1] - verts[0], verts[2] - verts[0]]).T
    inv = np.linalg.inv(jac)
    loc = (pts - verts[0]) @ inv.T
    hats = np.column_stack([1.0 - loc[:, 0] - loc[:, 1], loc[:, 0], loc[:, 1]])
    ref_grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return hats, ref_grads @ inv


def hat_gradients(mesh):
    """Constant P1 hat gradients for every triangle: (nt, 3, 2)."""
    v = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)  # (nt, 2, 2)
    inv = np.linalg.inv(jac)
    ref_grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return np.einsum("ri,tij->trj", ref_grads, inv)


# ---------------------------------------------------------------------------
# global DOF numbering
# ---------------------------------------------------------------------------

class DofHandler:
    """Global numbering of displacement and pressure unknowns.

    Displacement: 3 DOFs per edge (normal mean, normal slope, tangential
    mean); all three are eliminated on every displacement-Dirichlet edge.
    Pressure: one DOF per vertex (continuous block) followed by one DOF per
    triangle (cellwise-constant block); pressure boundary conditions are
    imposed weakly, so nothing is eliminated.
    """

    def __init__(self, mesh, tags):
        self.mesh = mesh
        self.tags = tags

        ne = mesh.num_edges
        self.edge_dofs = np.full((ne, 3), -1, dtype=int)
        free = ~tags.is_dirichlet
        idx = np.flatnonzero(free)
        self.edge_dofs[idx] = (3 * np.arange(len(idx))[:, None]) + np.arange(3)
        self.num_u = 3 * len(idx)

        self.num_pc = mesh.num_vertices
        self.num_p0 = mesh.num_triangles
        self.num_p = self.num_pc + self.num_p0

        # 9 displacement DOFs per triangle, edge major; -1 where constrained
        self.tri_u_dofs = self.edge_dofs[mesh.tri_edges].reshape(-1, 9)

    @property
    def num_total(self):
        return self.num_u + self.num_p

    def vertex_pdof(self, v):
        return v

    def cell_pdof(self, t):
        return self.num_pc + t


# ---------------------------------------------------------------------------
# per-mesh element table with congruence-class caching
# ---------------------------------------------------------------------------

class ElementTable:
    """Precomputed element data for one mesh at a fixed quadrature degree.

    Triangles are grouped into congruence classes (same vertex offsets from
    the centroid and same global edge orientations); the MTW construction and
    all quadrature-point tables are shared within a class.
    """

    def __init__(self, mesh, quad_degree=6):
        self.mesh = mesh
        self.rule = triangle_quadrature(quad_degree)
        self.hat_grads = hat_gradients(mesh)

        nq = len(self.rule.weights)
        self.hats_ref = self.rule.points  # (nq, 3) barycentric = hat values

        keys = {}
        self.tri_class = np.empty(mesh.num_triangles, dtype=int)
        self.classes = []
        for t in range(mesh.num_triangles):
            key = self._congruence_key(t)
            cid = keys.get(key)
            if cid is None:
                cid = len(self.classes)
                keys[key] = cid
                self.classes.append(self._build_class(t))
            self.tri_class[t] = cid
        self.class_tris = [
            np.flatnonzero(self.tri_class == c) for c in range(len(self.classes))
        ]

    def _frames(self, t):
        mesh = self.mesh
        frames = []
        for k in range(3):
            e = mesh.tri_edges[t, k]
            a, b = mesh.edges[e]
            frames.append(
                EdgeFrame(mesh.vertices[a], mesh.vertices[b], mesh.edge_normals[e])
            )
        return frames

    def _congruence_key(self, t):
        mesh = self.mesh
        verts = mesh.vertices[mesh.triangles[t]]
        centroid = verts.mean(axis=0)
        rel = np.round(verts - centroid, 12)
        orient = []
        for fr in self._frames(t):
            orient.append(np.round(np.concatenate([
                fr.start - centroid, fr.tangent, fr.normal]), 12))
        return rel.tobytes() + b"|" + np.concatenate(orient).tobytes()

    def _build_class(self, t):
        mesh = self.mesh
        verts = mesh.vertices[mesh.triangles[t]]
        basis = mtw_basis(verts, self._frames(t))
        pts, wts = self.rule.physical(verts)
        offsets = pts - basis.centroid  # quadrature offsets from the centroid
        phi = basis.values(pts)          # (nq, 9, 2)
        grad = basis.gradients(pts)      # (nq, 9, 2, 2)
        eps = np.empty(grad.shape[:2] + (3,))  # xx, yy, xy of the symmetric part
        eps[..., 0] = grad[..., 0, 0]
        eps[..., 1] = grad[..., 1, 1]
        eps[..., 2] = 0.5 * (grad[..., 0, 1] + grad[..., 1, 0])
        return {
            "basis": basis,
            "area": float(mesh.tri_areas[t]),
            "offsets": offsets,
            "weights": wts,
            "phi": phi,
            "grad": grad,
            "eps": eps,
            "div": basis.divergences(),
        }

    def basis_for(self, t):
        """MTW basis bound to triangle ``t`` (coefficients shared per class)."""
        cls = self.classes[self.tri_class[t]]
        proto = cls["basis"]
        centroid = self.mesh.tri_centroids[t]
        return MtwBasis(
            centroid, proto.scale, proto.coef_x, proto.coef_y,
            proto.div_consts, self._frames(t),
        )

    def quad_points(self, tris, cls):
        """Physical quadrature points for the given triangles of one class."""
        return self.mesh.tri_centroids[tris][:, None, :] + cls["offsets"][None, :, :]


def interpolate_displacement(mesh, dofs, func):
    """Edge-DOF interpolation of a smooth vector field onto the global space.

    ``func(points) -> (n, 2)``.  Constrained (Dirichlet) edge DOFs are
    dropped; the returned vector has length ``dofs.num_u``.
    """
    s, w = _edge_rule()
    out = np.zeros(dofs.num_u)
    slope_w = 12.0 * w * (s - 0.5)
    for e in range(mesh.num_edges):
        idx = dofs.edge_dofs[e]
        if idx[0] < 0:
            continue
        a, b = mesh.edges[e]
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        pts = pa[None, :] + s[:, None] * (pb - pa)[None, :]
        vals = np.asarray(func(pts), dtype=float)
        vn = vals @ mesh.edge_normals[e]
        vt = vals @ mesh.edge_tangents[e]
        out[idx[0]] = w @ vn
        out[idx[1]] = slope_w @ vn
        out[idx[2]] = w @ vt
    return out
