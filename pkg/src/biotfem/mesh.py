"""Structured triangulations of the unit square with full edge topology.

Meshes are immutable after construction.  Every edge carries a globally
fixed orientation: the stored unit normal of an interior edge points from
the adjacent triangle with the smaller index (``T+``) into the one with the
larger index (``T-``); boundary normals point outward.  The unit tangent is
the normal rotated by +90 degrees, and edge endpoints are stored in the
order that makes ``(b - a)/|b - a|`` equal to the tangent.  This fixes the
sign of every jump and every edge degree of freedom once and for all, so
assembled matrices are reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

_GEOM_TOL = 1e-12


class Mesh:
    """Conforming triangulation with precomputed edge/adjacency data.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise vertex indices
    edges : (ne, 2) int array, endpoint indices in oriented order
    edge_tris : (ne, 2) int array, [T+, T-]; T- is -1 on the boundary
    tri_edges : (nt, 3) int array, edge index opposite-free ordering:
        local edge k joins local vertices (k, k+1 mod 3)
    tri_edge_signs : (nt, 3) int array, +1 if the stored edge orientation
        agrees with the local (k -> k+1) direction
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=int)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must be an (nv, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be an (nt, 3) array")

        v = self.vertices
        t = self.triangles
        d1 = v[t[:, 1]] - v[t[:, 0]]
        d2 = v[t[:, 2]] - v[t[:, 0]]
        self.tri_areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(self.tri_areas <= 0.0):
            bad = int(np.argmin(self.tri_areas))
            raise ValueError(f"triangle {bad} is not counterclockwise (signed area <= 0)")
        self.tri_centroids = v[t].mean(axis=1)

        self._build_edges()
        self._orient_edges()

        edge_vec = v[self.edges[:, 1]] - v[self.edges[:, 0]]
        self.h_max = float(np.max(np.linalg.norm(edge_vec, axis=1)))

    # -- construction helpers -------------------------------------------------

    def _build_edges(self):
        nt = self.triangles.shape[0]
        index = {}
        edges = []
        edge_tris = []
        tri_edges = np.empty((nt, 3), dtype=int)
        for t in range(nt):
            tri = self.triangles[t]
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                key = (a, b) if a < b else (b, a)
                e = index.get(key)
                if e is None:
                    e = len(edges)
                    index[key] = e
                    edges.append(key)
                    edge_tris.append([t, -1])
                else:
                    if edge_tris[e][1] != -1:
                        raise ValueError(f"edge {key} shared by more than two triangles")
                    edge_tris[e][1] = t
                tri_edges[t, k] = e
        self.edges = np.array(edges, dtype=int)
        edge_tris = np.array(edge_tris, dtype=int)
        # T+ is the smaller adjacent triangle index
        interior = edge_tris[:, 1] >= 0
        swap = interior & (edge_tris[:, 0] > edge_tris[:, 1])
        edge_tris[swap] = edge_tris[swap][:, ::-1]
        self.edge_tris = edge_tris
        self.tri_edges = tri_edges

    def _orient_edges(self):
        v = self.vertices
        a = self.edges[:, 0]
        b = self.edges[:, 1]
        vec = v[b] - v[a]
        length = np.linalg.norm(vec, axis=1)
        tang = vec / length[:, None]
        # rotate tangent by -90 degrees: candidate normal
        norm = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
        mid = 0.5 * (v[a] + v[b])

        interior = self.edge_tris[:, 1] >= 0
        ref = np.empty_like(norm)
        ref[interior] = (
            self.tri_centroids[self.edge_tris[interior, 1]]
            - self.tri_centroids[self.edge_tris[interior, 0]]
        )
        ref[~interior] = mid[~interior] - self.tri_centroids[self.edge_tris[~interior, 0]]
        flip = np.einsum("ij,ij->i", norm, ref) < 0.0
        self.edges[flip] = self.edges[flip][:, ::-1]
        tang[flip] *= -1.0
        norm[flip] *= -1.0

        self.edge_lengths = length
        self.edge_tangents = tang
        self.edge_normals = norm
        self.edge_midpoints = mid

        # sign of stored orientation vs local (k -> k+1 mod 3) direction;
        # local edge k starts at local vertex k
        self.tri_edge_signs = np.where(
            self.edges[self.tri_edges][:, :, 0] == self.triangles, 1, -1
        )

    # -- queries ---------------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    @property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_tris[:, 1] < 0)

    @property
    def interior_edges(self):
        return np.flatnonzero(self.edge_tris[:, 1] >= 0)

    def dump(self, stream):
        """Write a plain-text dump (vertices, triangles, oriented edges)."""
        stream.write(f"vertices {self.num_vertices}\n")
        for x, y in self.vertices:
            stream.write(f"{x:.17g} {y:.17g}\n")
        stream.write(f"triangles {self.num_triangles}\n")
        for a, b, c in self.triangles:
            stream.write(f"{a} {b} {c}\n")
        stream.write(f"edges {self.num_edges}\n")
        for (a, b), (tp, tm) in zip(self.edges, self.edge_tris):
            stream.write(f"{a} {b} {tp} {tm}\n")


def build_structured_mesh(n):
    """Triangulate the unit square into n x n subsquares, two triangles each.

    Each subsquare is split along the diagonal from its lower-left to its
    upper-right corner.  Vertices are numbered lexicographically (x fastest),
    triangles pairwise per subsquare (lower-right first).
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigurationError(f"mesh subdivision must be a positive integer, got {n!r}")
    n = int(n)
    xs = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    triangles = np.empty((2 * n * n, 3), dtype=int)
    k = 0
    for j in range(n):
        for i in range(n):
            ll, lr = vid(i, j), vid(i + 1, j)
            ur, ul = vid(i + 1, j + 1), vid(i, j + 1)
            triangles[k] = (ll, lr, ur)      # lower-right triangle
            triangles[k + 1] = (ll, ur, ul)  # upper-left triangle
            k += 2
    return Mesh(vertices, triangles)


@dataclass(frozen=True)
class BoundaryTags:
    """Boundary-edge membership for the two partitions of the boundary.

    ``is_dirichlet``/``is_traction`` partition the boundary for the
    displacement, ``is_pressure``/``is_flux`` for the pressure.  All four
    arrays have one entry per edge and are False on interior edges.
    """

    is_dirichlet: np.ndarray
    is_traction: np.ndarray
    is_pressure: np.ndarray
    is_flux: np.ndarray

    @property
    def dirichlet_edges(self):
        return np.flatnonzero(self.is_dirichlet)

    @property
    def pressure_edges(self):
        return np.flatnonzero(self.is_pressure)


def parse_region(spec):
    """Turn a region descriptor into a midpoint predicate.

    Accepts a callable ``pred(x, y) -> bool-array`` or a string: ``"all"``,
    ``"none"``, one of ``"x=0" | "x=1" | "y=0" | "y=1"``, or a comma-joined
    combination such as ``"x=0,y=1"``.
    """
    if callable(spec):
        return spec
    if not isinstance(spec, str):
        raise ConfigurationError(f"unsupported region descriptor {spec!r}")
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    if not parts:
        raise ConfigurationError("empty region descriptor")

    sides = []
    for p in parts:
        if p == "all":
            return lambda x, y: np.ones_like(np.asarray(x), dtype=bool)
        if p == "none":
            return lambda x, y: np.zeros_like(np.asarray(x), dtype=bool)
        if p in ("x=0", "x=1", "y=0", "y=1"):
            sides.append(p)
        else:
            raise ConfigurationError(f"unknown boundary region {p!r}")

    def pred(x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        hit = np.zeros_like(x, dtype=bool)
        for s in sides:
            axis, val = s.split("=")
            coord = x if axis == "x" else y
            hit |= np.abs(coord - float(val)) < _GEOM_TOL
        return hit

    return pred


def classify_boundary(mesh, gamma_d_spec="x=0", gamma_p_spec="all", require_nonempty=True):
    """Tag boundary edges by the two boundary partitions.

    ``gamma_d_spec`` selects the displacement-Dirichlet part; its complement
    on the boundary is the traction part.  ``gamma_p_spec`` selects the
    pressure-Dirichlet part; its complement is the no-flux part.  Both
    selected parts must be nonempty unless ``require_nonempty`` is False
    (useful for tests of pure-traction configurations).
    """
    ne = mesh.num_edges
    is_d = np.zeros(ne, dtype=bool)
    is_t = np.zeros(ne, dtype=bool)
    is_p = np.zeros(ne, dtype=bool)
    is_f = np.zeros(ne, dtype=bool)

    bnd = mesh.boundary_edges
    mx = mesh.edge_midpoints[bnd, 0]
    my = mesh.edge_midpoints[bnd, 1]
    d_hit = np.asarray(parse_region(gamma_d_spec)(mx, my), dtype=bool)
    p_hit = np.asarray(parse_region(gamma_p_spec)(mx, my), dtype=bool)

    if require_nonempty:
        if not d_hit.any():
            raise ConfigurationError(
                f"displacement Dirichlet region {gamma_d_spec!r} selects no boundary edges"
            )
        if not p_hit.any():
            raise ConfigurationError(
                f"pressure Dirichlet region {gamma_p_spec!r} selects no boundary edges"
            )

    is_d[bnd] = d_hit
    is_t[bnd] = ~d_hit
    is_p[bnd] = p_hit
    is_f[bnd] = ~p_hit
    return BoundaryTags(is_d, is_t, is_p, is_f)


def edge_geometry(mesh, e):
    """Length, unit normal, unit tangent and midpoint of edge ``e``."""
    if not 0 <= e < mesh.num_edges:
        raise IndexError(f"edge index {e} out of range")
    return (
        float(mesh.edge_lengths[e]),
        mesh.edge_normals[e].copy(),
        mesh.edge_tangents[e].copy(),
        mesh.edge_midpoints[e].copy(),
    )
