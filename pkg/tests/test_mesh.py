import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathogen_control.mesh import MeshSpec, Region, build_mesh, region_mask, region_weights


@pytest.mark.parametrize("spec, cells, verts", [
    (MeshSpec(8, 4, 80, 40), 6400, 3321),
    (MeshSpec(1, 1, 1, 1), 2, 4),
    (MeshSpec(8, 4, 2, 1), 4, 6),
])
def test_counts(spec, cells, verts):
    mesh = build_mesh(spec)
    assert mesh.n_cells == cells == spec.n_cells
    assert mesh.n_vertices == verts == spec.n_vertices


def test_small_mesh_area_and_layout():
    mesh = build_mesh(MeshSpec(8, 4, 2, 1))
    assert mesh.areas.sum() == pytest.approx(32.0, rel=1e-12)
    # row-major from the origin
    np.testing.assert_allclose(mesh.vertices[:3], [[0, 0], [4, 0], [8, 0]])
    np.testing.assert_allclose(mesh.vertices[3:], [[0, 4], [4, 4], [8, 4]])
    # lower-left to upper-right diagonal
    assert list(mesh.cells[0]) == [0, 1, 4]
    assert list(mesh.cells[1]) == [0, 4, 3]
    assert mesh.boundary.all()


@pytest.mark.parametrize("bad", [
    dict(lx=0), dict(ly=-1), dict(nx=0), dict(ny=-3), dict(nx=2.5),
])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        MeshSpec(**bad)


@settings(max_examples=30, deadline=None)
@given(nx=st.integers(1, 40), ny=st.integers(1, 40),
       lx=st.floats(0.1, 20), ly=st.floats(0.1, 20))
def test_count_formulas_and_tiling(nx, ny, lx, ly):
    mesh = build_mesh(MeshSpec(lx, ly, nx, ny))
    assert mesh.n_cells == 2 * nx * ny
    assert mesh.n_vertices == (nx + 1) * (ny + 1)
    assert np.all(mesh.areas > 0)
    assert mesh.areas.sum() == pytest.approx(lx * ly, rel=1e-12)
    assert mesh.mass_matrix().sum() == pytest.approx(lx * ly, rel=1e-10)
    assert mesh.boundary.sum() == 2 * (nx + ny)


def test_gradients_reproduce_linear_functions():
    mesh = build_mesh(MeshSpec(3, 2, 5, 4))
    u = mesh.interpolate(lambda x, y: 2.0 * x - 3.0 * y + 1.0)
    g = np.einsum("ci,cik->ck", u[mesh.cells], mesh.grads)
    np.testing.assert_allclose(g, np.tile([2.0, -3.0], (mesh.n_cells, 1)), atol=1e-12)


def test_stiffness_annihilates_constants():
    mesh = build_mesh(MeshSpec(8, 4, 10, 5))
    S = mesh.stiffness_matrix()
    np.testing.assert_allclose(S @ np.ones(mesh.n_vertices), 0.0, atol=1e-12)


@pytest.mark.parametrize("region, area", [
    (Region(xmax=2.0), 8.0),
    (Region(), 32.0),
    (Region(xmax=4.0), 16.0),
])
def test_region_totals(region, area):
    mesh = build_mesh(MeshSpec())
    w = region_mask(mesh, region)
    assert w.sum() == pytest.approx(area, rel=1e-12)
    assert region.area_in(8, 4) == area


def test_region_cutting_cells_is_exact():
    # boundaries that do not follow mesh lines, including through diagonals
    mesh = build_mesh(MeshSpec(8, 4, 7, 3))
    region = Region(xmin=0.37, xmax=5.21, ymin=0.5, ymax=3.3)
    cells, nodal = region_weights(mesh, region)
    exact = (5.21 - 0.37) * (3.3 - 0.5)
    assert cells.sum() == pytest.approx(exact, rel=1e-12)
    assert nodal.sum() == pytest.approx(exact, rel=1e-12)
    # P1-exact: integral of a linear function over the box
    u = mesh.interpolate(lambda x, y: 1.0 + 2.0 * x + 0.5 * y)
    xa, xb, ya, yb = 0.37, 5.21, 0.5, 3.3
    analytic = ((xb - xa) * (yb - ya) + (xb ** 2 - xa ** 2) * (yb - ya)
                + 0.25 * (xb - xa) * (yb ** 2 - ya ** 2))
    assert nodal @ u == pytest.approx(analytic, rel=1e-12)


def test_region_weights_bounded_by_cell_area():
    mesh = build_mesh(MeshSpec(8, 4, 9, 5))
    cells, _ = region_weights(mesh, Region(xmin=1.3, xmax=6.1, ymax=2.2))
    assert np.all(cells >= 0)
    assert np.all(cells <= mesh.areas * (1 + 1e-12))


def test_empty_region_gives_zero():
    mesh = build_mesh(MeshSpec(8, 4, 4, 2))
    cells, nodal = region_weights(mesh, Region(xmin=9.0))
    assert not cells.any() and not nodal.any()


def test_evaluate_interpolates_linear_exactly():
    mesh = build_mesh(MeshSpec(8, 4, 6, 3))
    u = mesh.interpolate(lambda x, y: 3.0 - x + 4.0 * y)
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 8, 50), rng.uniform(0, 4, 50)
    np.testing.assert_allclose(mesh.evaluate(u, x, y), 3.0 - x + 4.0 * y, atol=1e-12)


def test_csv_dump(tmp_path):
    mesh = build_mesh(MeshSpec(8, 4, 2, 1))
    vpath, cpath = mesh.to_csv(tmp_path)
    vlines = vpath.read_text().splitlines()
    clines = cpath.read_text().splitlines()
    assert vlines[0] == "id,x,y,boundary" and len(vlines) == 7
    assert clines[0] == "id,v0,v1,v2" and len(clines) == 5
    assert clines[1] == "0,0,1,4"
