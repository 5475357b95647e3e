import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import disk_indicator
from eitshape.grid_fem import (
    DirichletSolver,
    FemError,
    NeumannSolver,
    boundary_inner_product,
    boundary_trace,
    boundary_values,
    build_crossed_grid,
    energy,
    p1_interpolate,
    resample_boundary,
    solve_dirichlet,
    solve_neumann,
    weighted_stiffness_action,
)
from eitshape.ntd import sinusoidal_current


def g1(mesh):
    return boundary_values(mesh, sinusoidal_current(1))


# --------------------------------------------------------------------------
# mesh


@pytest.mark.parametrize("n, tris, verts", [(1, 4, 5), (2, 16, 13), (5, 100, 61)])
def test_mesh_counts(n, tris, verts):
    mesh = build_crossed_grid(n)
    assert mesh.n_triangles == tris
    assert mesh.n_vertices == verts


def test_mesh_rejects_zero():
    with pytest.raises(ValueError):
        build_crossed_grid(0)


def test_mesh_area_and_perimeter(mesh64):
    assert mesh64.n_triangles == 16384
    assert abs(mesh64.areas.sum() - 1.0) < 1e-12
    assert np.all(mesh64.areas > 0)
    edges = mesh64.vertices[mesh64.boundary_edges]
    lengths = np.linalg.norm(edges[:, 1] - edges[:, 0], axis=1)
    assert abs(lengths.sum() - 4.0) < 1e-12
    assert set(np.unique(mesh64.boundary_segments)) == {0, 1, 2, 3}


def test_vertex_ordering():
    mesh = build_crossed_grid(2)
    np.testing.assert_allclose(mesh.vertices[:3], [[0, 0], [0.5, 0], [1, 0]])
    np.testing.assert_allclose(mesh.vertices[9], [0.25, 0.25])


def test_positive_orientation(mesh16):
    v = mesh16.vertices[mesh16.triangles]
    cross = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    assert np.all(cross > 0)


# --------------------------------------------------------------------------
# boundary quadrature


def test_boundary_inner_product_perimeter(mesh16, rng):
    nb = len(mesh16.boundary_nodes)
    assert abs(boundary_inner_product(mesh16, np.ones(nb), np.ones(nb)) - 4.0) < 1e-14
    a, b = rng.standard_normal(nb), rng.standard_normal(nb)
    assert boundary_inner_product(mesh16, a, b) == pytest.approx(boundary_inner_product(mesh16, b, a), rel=1e-14)


def test_boundary_inner_product_mesh_mismatch(mesh16, mesh32):
    with pytest.raises(FemError):
        boundary_inner_product(mesh16, np.ones(len(mesh32.boundary_nodes)), np.ones(len(mesh32.boundary_nodes)))


def _segment_trapezoid_g1_squared(n):
    """Composite trapezoid of g1^2 per side, using one-sided values at the corners."""
    t = np.linspace(0.0, 1.0, n + 1)
    w = np.full(n + 1, 1.0 / n)
    w[[0, -1]] *= 0.5
    return 2 * np.sum(w * np.sin(np.pi * t) ** 2) + 2 * np.sum(w * np.cos(np.pi * t) ** 2)


def test_boundary_quadrature_corner_deficit():
    """Nodal corner values average the one-sided limits, costing exactly 1/n of ||g1||^2."""
    for n in (16, 64, 256):
        mesh = build_crossed_grid(n)
        val = boundary_inner_product(mesh, g1(mesh), g1(mesh))
        assert val == pytest.approx(_segment_trapezoid_g1_squared(n) - 1.0 / n, rel=1e-12)
    fine = _segment_trapezoid_g1_squared(512)
    mesh = build_crossed_grid(256)
    assert abs(boundary_inner_product(mesh, g1(mesh), g1(mesh)) - fine) <= 5e-3 * fine


@pytest.mark.xfail(strict=True, reason="corner jump of g1 limits nodal quadrature to O(h); 0.78% at n=64")
def test_boundary_quadrature_refined_oracle_n64(mesh64):
    fine = _segment_trapezoid_g1_squared(512)
    assert abs(boundary_inner_product(mesh64, g1(mesh64), g1(mesh64)) - fine) <= 5e-3 * fine


def test_currents_zero_mean(mesh64):
    nb = len(mesh64.boundary_nodes)
    for k in range(1, 24):
        g = boundary_values(mesh64, sinusoidal_current(k))
        assert abs(boundary_inner_product(mesh64, g, np.ones(nb))) < 1e-10


# --------------------------------------------------------------------------
# Neumann problem


def test_neumann_zero_datum(mesh16):
    u = solve_neumann(mesh16, 1.0, np.zeros(len(mesh16.boundary_nodes)))
    assert np.abs(u).max() == 0.0


def test_neumann_energy_identity(mesh64):
    g = g1(mesh64)
    u = solve_neumann(mesh64, 1.0, g)
    e = energy(mesh64, 1.0, u)
    assert abs(e - boundary_inner_product(mesh64, g, boundary_trace(mesh64, u))) <= 1e-8 * e
    # zero-mean trace
    nb = len(mesh64.boundary_nodes)
    assert abs(boundary_inner_product(mesh64, boundary_trace(mesh64, u), np.ones(nb))) < 1e-10


def test_neumann_residual(mesh32):
    sigma = 1.0 + disk_indicator(mesh32)
    solver = NeumannSolver(mesh32, sigma)
    g = g1(mesh32)
    assert solver.residual(g, solver.solve(g)) <= 1e-10


def test_neumann_mesh_refinement(mesh64, mesh128):
    f64 = boundary_trace(mesh64, solve_neumann(mesh64, 1.0, g1(mesh64)))
    f128 = boundary_trace(mesh128, solve_neumann(mesh128, 1.0, g1(mesh128)))
    f128_on_64 = resample_boundary(mesh128, f128, mesh64)
    err = np.sqrt(boundary_inner_product(mesh64, f64 - f128_on_64, f64 - f128_on_64))
    ref = np.sqrt(boundary_inner_product(mesh64, f128_on_64, f128_on_64))
    assert err <= 0.01 * ref


def test_neumann_rejects_bad_inputs(mesh16):
    nb = len(mesh16.boundary_nodes)
    with pytest.raises(FemError, match="incompatible Neumann datum"):
        solve_neumann(mesh16, 1.0, np.ones(nb))
    with pytest.raises(FemError):
        solve_neumann(mesh16, 0.0, np.zeros(nb))
    bad = np.ones(mesh16.n_triangles)
    bad[3] = -1
    with pytest.raises(FemError):
        NeumannSolver(mesh16, bad)


def test_neumann_linearity_and_scaling(mesh32):
    sigma = 1.0 + disk_indicator(mesh32)
    ga = g1(mesh32)
    gb = boundary_values(mesh32, sinusoidal_current(3))
    solver = NeumannSolver(mesh32, sigma)
    ua, ub = solver.solve(ga), solver.solve(gb)
    assert np.abs(solver.solve(2.0 * ga - 0.5 * gb) - (2.0 * ua - 0.5 * ub)).max() <= 1e-10
    assert np.abs(solve_neumann(mesh32, 3.0 * sigma, ga) - ua / 3.0).max() <= 1e-10


def test_solve_load_matches_boundary_solve(mesh16):
    solver = NeumannSolver(mesh16, 1.0)
    g = g1(mesh16)
    np.testing.assert_allclose(solver.solve_load(solver.load(g))[0], solver.solve(g), atol=1e-12)


def test_weighted_stiffness_action(mesh16, rng):
    w = rng.random(mesh16.n_triangles)
    w[::3] = 0.0
    u = rng.standard_normal((2, mesh16.n_vertices))
    K = mesh16.stiffness(w + 1.0) - mesh16.stiffness(1.0)
    np.testing.assert_allclose(weighted_stiffness_action(mesh16, w, u), (K @ u.T).T, atol=1e-12)


# --------------------------------------------------------------------------
# Dirichlet problem


def test_dirichlet_constant_and_affine(mesh32):
    nb = len(mesh32.boundary_nodes)
    v = solve_dirichlet(mesh32, 1.0, np.full(nb, 2.5))
    assert np.abs(v - 2.5).max() < 1e-12
    f = boundary_values(mesh32, lambda x, y, s: x - 0.5)
    v = solve_dirichlet(mesh32, 1.0, f)
    assert np.abs(v - (mesh32.vertices[:, 0] - 0.5)).max() < 1e-12


def test_dirichlet_boundary_exact(mesh16, rng):
    f = rng.standard_normal(len(mesh16.boundary_nodes))
    v = solve_dirichlet(mesh16, 1.0 + disk_indicator(mesh16), f)
    assert np.array_equal(boundary_trace(mesh16, v), f)


def test_dirichlet_neumann_consistency(mesh32):
    """Dirichlet solve of a Neumann trace reproduces the Neumann potential."""
    sigma = 1.0 + disk_indicator(mesh32)
    g = g1(mesh32)
    u = solve_neumann(mesh32, sigma, g)
    v = solve_dirichlet(mesh32, sigma, boundary_trace(mesh32, u))
    assert np.abs(u - v).max() <= 1e-10 * np.abs(u).max()
    assert energy(mesh32, sigma, v) == pytest.approx(boundary_inner_product(mesh32, g, boundary_trace(mesh32, v)),
                                                     rel=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_dirichlet_maximum_principle(seed):
    mesh = build_crossed_grid(8)
    f = np.random.default_rng(seed).uniform(-3, 3, len(mesh.boundary_nodes))
    v = DirichletSolver(mesh, 2.0).solve(f)
    assert v.min() >= f.min() - 1e-12
    assert v.max() <= f.max() + 1e-12


# --------------------------------------------------------------------------
# interpolation


def test_p1_interpolate_reproduces_affine(mesh16, rng):
    u = 1.0 + 2.0 * mesh16.vertices[:, 0] - 3.0 * mesh16.vertices[:, 1]
    pts = rng.random((200, 2))
    np.testing.assert_allclose(p1_interpolate(mesh16, u, pts), 1.0 + 2.0 * pts[:, 0] - 3.0 * pts[:, 1], atol=1e-12)


def test_resample_boundary_exact_on_nested_meshes(mesh16, mesh32):
    f32 = boundary_values(mesh32, lambda x, y, s: x + 2 * y)
    f16 = boundary_values(mesh16, lambda x, y, s: x + 2 * y)
    np.testing.assert_allclose(resample_boundary(mesh32, f32, mesh16), f16, atol=1e-14)
