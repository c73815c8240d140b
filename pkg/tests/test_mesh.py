import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiberdialysis.exceptions import ConfigurationError, UsageError
from fiberdialysis.mesh import (AxiGeometry, Boundary, Subdomain, boundary_vertices,
                                build_structured_mesh)

GEOM = AxiGeometry(L=1.0, R1=0.4, R2=0.6, R=1.0)


def test_minimal_mesh_counts():
    mesh = build_structured_mesh(GEOM, 1, 1, 1, 1)
    assert mesh.n_vertices == 8
    assert mesh.n_triangles == 6


def test_vertex_and_triangle_count_formula():
    mesh = build_structured_mesh(GEOM, 5, 3, 2, 4)
    nr = 3 + 2 + 4
    assert mesh.n_vertices == 6 * (nr + 1)
    assert mesh.n_triangles == 2 * 5 * nr


def test_all_triangles_positively_oriented():
    mesh = build_structured_mesh(GEOM, 4, 2, 2, 3)
    assert np.all(mesh.triangle_areas() > 0)


def test_areas_sum_to_rectangle():
    mesh = build_structured_mesh(GEOM, 7, 3, 2, 5)
    total = mesh.triangle_areas().sum()
    assert total == pytest.approx(GEOM.L * GEOM.R, rel=1e-12)


def test_blood_label_from_centroid():
    mesh = build_structured_mesh(GEOM, 3, 2, 1, 2)
    r_c = mesh.vertices[mesh.triangles, 1].mean(axis=1)
    blood = mesh.subdomain_of_triangle == Subdomain.BLOOD
    assert np.array_equal(blood, r_c < GEOM.R1)


def test_interface_gridline_alignment():
    geom = AxiGeometry(L=1.0, R1=0.5, R2=0.7, R=1.0)
    mesh = build_structured_mesh(geom, 2, 2, 1, 2)
    assert 0.5 in mesh.r_levels
    assert 0.7 in mesh.r_levels


def test_refinement_quadruples_triangles():
    coarse = build_structured_mesh(GEOM, 3, 2, 1, 2)
    fine = build_structured_mesh(GEOM, 6, 4, 2, 4)
    assert fine.n_triangles == 4 * coarse.n_triangles


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(1, 6), nr_b=st.integers(1, 4),
       nr_m=st.integers(1, 3), nr_d=st.integers(1, 4))
def test_counting_invariants_hold(nx, nr_b, nr_m, nr_d):
    mesh = build_structured_mesh(GEOM, nx, nr_b, nr_m, nr_d)
    nr = nr_b + nr_m + nr_d
    assert mesh.n_vertices == (nx + 1) * (nr + 1)
    assert mesh.n_triangles == 2 * nx * nr
    assert mesh.triangle_areas().sum() == pytest.approx(GEOM.L * GEOM.R, rel=1e-12)


def test_interface_vertices_touch_two_subdomains():
    mesh = build_structured_mesh(GEOM, 3, 2, 2, 2)
    for tag, pair in [(Boundary.BLOOD_MEMBRANE, {Subdomain.BLOOD, Subdomain.MEMBRANE}),
                      (Boundary.DIALYSATE_MEMBRANE, {Subdomain.MEMBRANE, Subdomain.DIALYSATE})]:
        for v in boundary_vertices(mesh, tag):
            touching = {Subdomain(mesh.subdomain_of_triangle[t])
                        for t in np.flatnonzero((mesh.triangles == v).any(axis=1))}
            assert touching == pair


def test_boundary_cover_is_exact():
    mesh = build_structured_mesh(GEOM, 3, 2, 1, 2)
    # every domain-boundary edge of the triangulation carries exactly one tag
    exterior_tags = {Boundary.INLET_BLOOD.value, Boundary.OUTLET_BLOOD.value,
                     Boundary.INLET_DIALYSATE.value, Boundary.OUTLET_DIALYSATE.value,
                     Boundary.AXIS.value, Boundary.OUTER.value,
                     Boundary.MEMBRANE_LEFT.value, Boundary.MEMBRANE_RIGHT.value}
    tagged = [tuple(sorted(e)) for e, t in zip(mesh.boundary_edges, mesh.edge_tags)
              if t in exterior_tags]
    assert len(tagged) == len(set(tagged))
    # count exterior edges geometrically: 2*nx horizontal + 2*nr vertical runs
    assert len(tagged) == 2 * mesh.nx + 2 * mesh.nr


def test_outlet_blood_vertices_minimal():
    mesh = build_structured_mesh(GEOM, 1, 1, 1, 1)
    idx = boundary_vertices(mesh, Boundary.OUTLET_BLOOD)
    assert idx.size == 2
    assert np.allclose(mesh.vertices[idx, 0], GEOM.L)
    assert sorted(mesh.vertices[idx, 1]) == [0.0, GEOM.R1]


def test_axis_vertices():
    mesh = build_structured_mesh(GEOM, 4, 2, 1, 2)
    idx = boundary_vertices(mesh, Boundary.AXIS)
    assert np.all(mesh.vertices[idx, 1] == 0.0)
    assert idx.size == mesh.nx + 1
    # ordered by increasing x
    assert np.all(np.diff(mesh.vertices[idx, 0]) > 0)


def test_blood_membrane_vertex_count():
    mesh = build_structured_mesh(GEOM, 6, 2, 1, 2)
    idx = boundary_vertices(mesh, Boundary.BLOOD_MEMBRANE)
    assert idx.size == mesh.nx + 1
    assert np.allclose(mesh.vertices[idx, 1], GEOM.R1)


def test_invalid_geometry_rejected():
    with pytest.raises(ConfigurationError):
        AxiGeometry(L=1.0, R1=0.7, R2=0.6, R=1.0)
    with pytest.raises(ConfigurationError):
        AxiGeometry(L=-1.0, R1=0.4, R2=0.6, R=1.0)


def test_zero_resolution_rejected():
    with pytest.raises(ConfigurationError):
        build_structured_mesh(GEOM, 0, 1, 1, 1)


def test_unknown_tag_rejected():
    mesh = build_structured_mesh(GEOM, 1, 1, 1, 1)
    with pytest.raises(UsageError):
        boundary_vertices(mesh, "not-a-tag")


def test_mesh_is_immutable():
    mesh = build_structured_mesh(GEOM, 2, 1, 1, 1)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 99.0


def test_dump_text(tmp_path):
    mesh = build_structured_mesh(GEOM, 1, 1, 1, 1)
    path = tmp_path / "mesh.txt"
    mesh.dump_text(path)
    text = path.read_text()
    assert "vertices 8" in text
    assert "triangles 6" in text
    assert "BLOOD" in text
