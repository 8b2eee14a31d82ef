import dataclasses

import numpy as np
import pytest

from moving_hw.errors import InvalidMesh, InvalidRadii, UnknownLabel
from moving_hw.mesh_disc import (
    FEField,
    assemble_weighted,
    boundary_quadrature,
    generate_annulus_mesh,
    generate_solid_torus_mesh,
    integration_by_parts_defect,
    norm_equivalence_bounds,
    norms,
    poincare_constant,
    read_mesh,
    surface_flux,
    validate_topology,
    write_mesh,
)
from moving_hw.motions import dilation_motion


def test_annulus_topology(annulus) -> None:
    assert annulus.K == 1
    assert annulus.L == 0
    report = validate_topology(annulus)
    assert report.valid
    assert report.betti_1 == 0
    assert annulus.volumes.min() > 0


def test_annulus_boundary_area(annulus) -> None:
    areas, _ = annulus.facet_geometry
    assert areas.sum() == pytest.approx(4 * np.pi * (2.0**2 + 1.0**2), rel=0.05)


def test_invalid_radii() -> None:
    with pytest.raises(InvalidRadii):
        generate_annulus_mesh(1.0, 2.0, 8)
    with pytest.raises(InvalidRadii):
        generate_solid_torus_mesh(0.5, 2.0, 4)


def test_torus_has_one_cut(torus) -> None:
    report = validate_topology(torus)
    assert torus.K == 0
    assert torus.L == 1
    assert report.betti_1 == 1
    assert report.cut_euler == [1]
    assert report.dual_connected_after_cut
    assert np.allclose(torus.cut_normals[0], [0.0, 1.0, 0.0])


def test_ball_has_no_inner_boundary(ball) -> None:
    assert ball.K == 0
    assert ball.L == 0
    assert validate_topology(ball).valid


def test_mesh_text_format(tmp_path, torus) -> None:
    path = write_mesh(torus, tmp_path / "torus.mesh")
    back = read_mesh(path)
    assert back.name == "torus"
    assert np.array_equal(back.vertices, torus.vertices)
    assert back.L == 1
    assert np.array_equal(np.sort(back.cut_labels), np.sort(torus.cut_labels))


def test_malformed_mesh_file(tmp_path) -> None:
    path = tmp_path / "bad.mesh"
    path.write_text("vertices 2\n0 0 0\n", encoding="utf-8")
    with pytest.raises(InvalidMesh):
        read_mesh(path)


def test_field_shape_is_checked(annulus) -> None:
    with pytest.raises(InvalidMesh):
        FEField("scalar", np.zeros(annulus.n_vertices + 1), annulus)


def test_identity_operators_are_euclidean(ball, identity) -> None:
    ops = assemble_weighted(ball, identity, 0.0)
    assert ops.J == pytest.approx(1.0)
    assert abs(ops.mass_t - ops.mass_t.T).max() <= 1e-14 * abs(ops.mass_t).max()
    one = FEField("scalar", np.ones(ball.n_vertices), ball)
    assert norms(one, ball, identity, 0.0, ops=ops).L2_t == pytest.approx(np.sqrt(ball.volumes.sum()))
    assert ball.volumes.sum() == pytest.approx(4 * np.pi / 3, rel=0.1)


def test_dilation_weights_volume(ball) -> None:
    motion = dilation_motion(2.0, 0.0, 1.0)
    one = FEField("scalar", np.ones(ball.n_vertices), ball)
    assert norms(one, ball, motion, 0.0).L2_t == pytest.approx(np.sqrt(8.0 * ball.volumes.sum()))
    # ⟨ũ, ũ⟩_t = ∫ 4|ũ|²·8 dy for constant fields
    e1 = FEField("vector3", np.tile([1.0, 0.0, 0.0], (ball.n_vertices, 1)), ball)
    assert norms(e1, ball, motion, 0.0).L2_t == pytest.approx(np.sqrt(32.0 * ball.volumes.sum()))
    low, high = norm_equivalence_bounds(assemble_weighted(ball, motion, 0.0))
    assert low == pytest.approx(np.sqrt(32.0))
    assert high == pytest.approx(np.sqrt(32.0))


def test_zero_field_norms(annulus, identity) -> None:
    zero = FEField.zeros("vector3", annulus)
    result = norms(zero, annulus, identity, 0.0)
    assert (result.L2_t, result.H1_t, result.H2_broken) == (0.0, 0.0, 0.0)


def test_constant_field_has_no_outer_flux(annulus, identity) -> None:
    field = FEField("vector3", np.tile([1.0, 0.0, 0.0], (annulus.n_vertices, 1)), annulus)
    area = 4 * np.pi * 4.0
    assert abs(surface_flux(field, "gamma0", annulus, identity, 0.0)) < 1e-10 * area


def test_point_source_flux_through_inner_sphere(annulus, identity) -> None:
    x = annulus.vertices
    field = FEField("vector3", x / np.linalg.norm(x, axis=1)[:, None] ** 3, annulus)
    assert surface_flux(field, "gamma1", annulus, identity, 0.0) == pytest.approx(-4 * np.pi, rel=0.1)


def test_unknown_surface(annulus, identity) -> None:
    field = FEField.zeros("vector3", annulus)
    with pytest.raises(UnknownLabel):
        surface_flux(field, "sigma1", annulus, identity, 0.0)


def test_poincare_constant_scales_with_dilation(annulus, identity) -> None:
    c_id = poincare_constant(annulus, identity, 0.0)
    c_big = poincare_constant(annulus, dilation_motion(2.0, 0.0, 1.0), 0.0)
    assert c_id > 0
    assert c_big == pytest.approx(2.0 * c_id, rel=1e-6)


def test_integration_by_parts_is_exact_for_p1(annulus, rng) -> None:
    u = rng.normal(size=(annulus.n_vertices, 3))
    q = rng.normal(size=annulus.n_vertices)
    assert abs(integration_by_parts_defect(annulus, u, q)) < 1e-9


@pytest.mark.parametrize(
    ("fixture", "chart", "expected"),
    [("ball", "sphere", 4.0 * np.pi), ("annulus", "shell", 28.0 * np.pi), ("torus", "torus", 3.0 * np.pi**2)],
)
def test_boundary_quadrature_is_exact_on_reference_surface(request, fixture, chart, expected) -> None:
    mesh = request.getfixturevalue(fixture)
    rule = boundary_quadrature(mesh)
    assert rule.chart == chart
    assert np.einsum("ni,ni->", rule.points, rule.weighted_normals) == pytest.approx(expected, rel=1e-12)
    assert np.abs(rule.weighted_normals.sum(axis=0)).max() < 1e-12
    assert set(np.unique(rule.labels)) == set(range(mesh.K + 1))


def test_annulus_rule_orients_inner_sphere_into_the_hole(annulus) -> None:
    rule = boundary_quadrature(annulus)
    inner = rule.labels == 1
    assert np.allclose(np.linalg.norm(rule.points[inner], axis=1), 1.0)
    assert np.einsum("ni,ni->", rule.points[inner], rule.weighted_normals[inner]) == pytest.approx(-4.0 * np.pi, rel=1e-12)


def test_facet_rule_integrates_position_exactly(ball) -> None:
    polyhedron = dataclasses.replace(ball, name="polyhedron")
    rule = boundary_quadrature(polyhedron)
    assert rule.chart == "facet"
    assert np.einsum("ni,ni->", rule.points, rule.weighted_normals) == pytest.approx(3.0 * ball.volumes.sum(), rel=1e-10)
