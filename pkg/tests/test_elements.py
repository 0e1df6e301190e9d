import numpy as np
import pytest

from biotfem.elements import (
    DofHandler,
    ElementTable,
    eg_eval,
    interpolate_displacement,
    mtw_basis,
    mtw_dof_values,
    mtw_eval,
    mtw_interpolate,
)
from biotfem.errors import ElementConstructionError
from biotfem.mesh import build_structured_mesh, classify_boundary

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
SKEW = np.array([[0.2, 0.1], [1.1, 0.3], [0.4, 0.9]])


def interior_points(verts, n=25, seed=0):
    bary = np.random.default_rng(seed).dirichlet([1.0, 1.0, 1.0], size=n)
    return bary @ verts


@pytest.mark.parametrize("verts", [REF, SKEW])
def test_local_space_dimension_and_duality(verts):
    basis = mtw_basis(verts)
    assert basis.coef_x.shape == (10, 9)
    dual = np.array(
        [mtw_dof_values(basis.frames, lambda p, j=j: basis.values(p)[:, j, :])
         for j in range(9)]
    ).T
    assert np.abs(dual - np.eye(9)).max() <= 1e-10


def test_degenerate_triangle_rejected():
    flat = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(ElementConstructionError):
        mtw_basis(flat)


@pytest.mark.parametrize("verts", [REF, SKEW])
def test_constant_field_reproduced(verts):
    basis = mtw_basis(verts)
    coef = mtw_interpolate(
        basis, lambda p: np.column_stack([np.ones(len(p)), np.zeros(len(p))])
    )
    pts = interior_points(verts)
    vals = np.einsum("j,njc->nc", coef, basis.values(pts))
    assert np.abs(vals - [1.0, 0.0]).max() <= 1e-12


@pytest.mark.parametrize("verts", [REF, SKEW])
def test_linear_field_reproduced(verts):
    basis = mtw_basis(verts)
    coef = mtw_interpolate(basis, lambda p: p)  # v = (x, y), div v = 2
    pts = interior_points(verts, seed=1)
    vals = np.einsum("j,njc->nc", coef, basis.values(pts))
    assert np.abs(vals - pts).max() <= 1e-12
    div = float(coef @ basis.divergences())
    assert abs(div - 2.0) <= 1e-12


@pytest.mark.parametrize("verts", [REF, SKEW])
def test_divergence_is_cellwise_constant(verts):
    basis = mtw_basis(verts)
    assert basis.divergence_residual() <= 1e-10
    # pointwise check: divergence from Jacobians equals the stored constant
    pts = interior_points(verts, seed=2)
    _, grads = mtw_eval(basis, pts)
    div_pts = grads[..., 0, 0] + grads[..., 1, 1]
    assert np.abs(div_pts - basis.divergences()[None, :]).max() <= 1e-10


@pytest.mark.parametrize("verts", [REF, SKEW])
def test_normal_trace_is_linear_on_edges(verts):
    basis = mtw_basis(verts)
    s = np.linspace(0.0, 1.0, 9)
    vand = np.vander(s, 4, increasing=True)
    fit = np.linalg.pinv(vand)
    for frame in basis.frames:
        pts = frame.start[None, :] + s[:, None] * (frame.end - frame.start)[None, :]
        vn = basis.values(pts) @ frame.normal  # (9 pts, 9 funcs)
        coef = fit @ vn
        scale = max(np.abs(coef).max(), 1.0)
        assert np.abs(coef[2:]).max() <= 1e-10 * scale


def test_divergence_theorem_consistency():
    # integral of div over the triangle equals the net normal flux, which the
    # edge DOFs encode directly as length times normal mean
    basis = mtw_basis(SKEW)
    d1 = SKEW[1] - SKEW[0]
    d2 = SKEW[2] - SKEW[0]
    area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
    for j in range(9):
        flux = sum(
            fr.length * (1.0 if 3 * k == j else 0.0)
            for k, fr in enumerate(basis.frames)
        )
        assert abs(basis.divergences()[j] * area - flux) <= 1e-10


def test_gradient_of_interpolated_linear_field():
    basis = mtw_basis(REF)
    coef = mtw_interpolate(
        basis, lambda p: np.column_stack([p[:, 0], np.zeros(len(p))])
    )
    pts = interior_points(REF, seed=3)
    _, grads = mtw_eval(basis, pts)
    jac = np.einsum("j,njkl->nkl", coef, grads)
    assert np.abs(jac - np.array([[1.0, 0.0], [0.0, 0.0]])).max() <= 1e-12


def test_value_at_centroid_constant_field():
    basis = mtw_basis(SKEW)
    coef = mtw_interpolate(
        basis, lambda p: np.column_stack([np.zeros(len(p)), np.ones(len(p))])
    )
    centroid = SKEW.mean(axis=0, keepdims=True)
    vals, _ = mtw_eval(basis, centroid)
    assert np.abs(np.einsum("j,njc->nc", coef, vals) - [0.0, 1.0]).max() <= 1e-12


def test_eg_hats_at_vertices_and_centroid():
    hats, grads = eg_eval(SKEW, np.vstack([SKEW, SKEW.mean(axis=0)]))
    assert np.abs(hats[:3] - np.eye(3)).max() <= 1e-13
    assert np.abs(hats[3] - 1.0 / 3.0).max() <= 1e-13
    assert abs(hats.sum(axis=1) - 1.0).max() <= 1e-13


def test_eg_gradients_unit_right_triangle():
    _, grads = eg_eval(REF, REF.mean(axis=0, keepdims=True))
    expected = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    assert np.abs(grads - expected).max() <= 1e-14


def test_dof_handler_counts():
    mesh = build_structured_mesh(3)
    tags = classify_boundary(mesh, "x=0", "all")
    dofs = DofHandler(mesh, tags)
    n_gd = tags.is_dirichlet.sum()
    assert dofs.num_u == 3 * (mesh.num_edges - n_gd)
    assert dofs.num_p == mesh.num_vertices + mesh.num_triangles
    assert dofs.num_total == dofs.num_u + dofs.num_p
    # constrained edges carry no DOFs, every other edge three consecutive
    assert np.all(dofs.edge_dofs[tags.is_dirichlet] == -1)
    free = dofs.edge_dofs[~tags.is_dirichlet].ravel()
    assert sorted(free) == list(range(dofs.num_u))
    assert dofs.tri_u_dofs.shape == (mesh.num_triangles, 9)


def test_element_table_congruence_caching():
    mesh = build_structured_mesh(8)
    table = ElementTable(mesh)
    # translation classes: two interior shapes plus boundary-orientation
    # variants along the bottom row and left column
    assert len(table.classes) == 4
    assert sum(len(t) for t in table.class_tris) == mesh.num_triangles


def test_element_table_matches_direct_construction():
    mesh = build_structured_mesh(3)
    table = ElementTable(mesh)
    rng = np.random.default_rng(4)
    for t in (0, 7, 12):
        verts = mesh.vertices[mesh.triangles[t]]
        direct = mtw_basis(verts, table._frames(t))
        cached = table.basis_for(t)
        pts = rng.dirichlet([1, 1, 1], size=6) @ verts
        # two independent nullspace constructions agree to roundoff only
        assert np.abs(direct.values(pts) - cached.values(pts)).max() <= 1e-12
        assert np.abs(direct.gradients(pts) - cached.gradients(pts)).max() <= 5e-12


def test_global_interpolation_reproduces_linear_field():
    mesh = build_structured_mesh(3)
    tags = classify_boundary(mesh, "none", "all", require_nonempty=False)
    dofs = DofHandler(mesh, tags)
    table = ElementTable(mesh)
    vec = interpolate_displacement(mesh, dofs, lambda p: p)
    rng = np.random.default_rng(5)
    for t in range(0, mesh.num_triangles, 5):
        basis = table.basis_for(t)
        coef = vec[dofs.tri_u_dofs[t]]
        pts = rng.dirichlet([1, 1, 1], size=4) @ mesh.vertices[mesh.triangles[t]]
        vals = np.einsum("j,njc->nc", coef, basis.values(pts))
        assert np.abs(vals - pts).max() <= 1e-12
